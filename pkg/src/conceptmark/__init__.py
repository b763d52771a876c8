"""Proactive concept watermarking for generative image models.

Per-concept bit secrets are embedded at generation time by perturbing the
concept's token embedding and the initial noise, and recovered later by a
query-conditioned retrieval network over frozen image/text features.
"""

from .encoding import (
    ConceptEncoder,
    NoiseTensor,
    PromptEmbedding,
    SecretMapper,
    apply_prompt_weight,
    concept_encoder_forward,
    perturb_noise,
    perturb_prompt,
    secret_mapper_forward,
    secret_to_pm,
)
from .errors import (
    ConceptMarkError,
    ConfigError,
    DataError,
    IoError,
    NumericError,
)
from .evaluation import (
    MetricsReport,
    attribution_accuracy,
    bit_accuracy,
    bitlength_study,
    build_multiconcept_samples,
    comprehensive_test,
    evaluate_single,
    fidelity_eval,
    fidelity_scores,
    generate_clean,
    generate_watermarked,
    multiconcept_eval,
    passive_baseline_accuracy,
    passive_baseline_attribute,
    passive_gallery,
    plot_report,
    register_grid_concepts,
    robustness_sweep,
    scaling_study,
    sequential_study,
    write_report,
)
from .distortions import DistortionSpec, adversarial_attack, apply, default_suite
from .generation import (
    ImageTensor,
    GeneratorConfig,
    SyntheticConceptDatasetConfig,
    TokenEmbeddingTable,
    ToyDenoiser,
    ToyGeneratorBackend,
    build_synthetic_dataset,
    clean_counterpart,
    embed_prompt,
    generate,
    load_image_png,
    pooled_condition,
    render_concept_image,
    sample_noise,
    save_image_png,
    train_toy_generator,
)
from .objectives import (
    LossBreakdown,
    LossWeights,
    loss_ce,
    loss_csd,
    loss_l2_image,
    loss_l2_latent,
    loss_reg,
    loss_total,
)
from .registry import (
    ConceptRecord,
    MultiConceptSample,
    Registry,
    Secret,
    load_multiconcept_dataset,
    load_registry,
    save_multiconcept_dataset,
    save_registry,
)
from .retrieval import (
    DEFAULT_TAU,
    AttributionResult,
    BackbonePretrainConfig,
    RetrievalNet,
    ToyFeatureBackbone,
    attribute,
    attribute_multi,
    binarize,
    decode_secret,
    embedding_separation,
    predict_embedding,
    pretrain_backbone,
)
from .serialization import (
    blob_to_tensors,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
    tensors_to_blob,
)
from .training import (
    ModelState,
    TrainConfig,
    build_model_state,
    gradient_audit,
    load_model_state,
    sample_batch,
    save_model_state,
    sequential_update,
    train,
    train_step,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
