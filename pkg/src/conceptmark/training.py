"""Joint training of the watermark insertion and retrieval networks.

One optimizer updates the concept encoder, secret mapper, retrieval net,
and secret decoder together; the generator and feature backbone stay
frozen. Clean counterparts are generated from the same noise and prompt
so the image losses measure only watermark-induced deviation, and clean
images double as negative decoding examples so the decoder cannot learn
to answer from the query text alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from . import templates
from .encoding import (
    ConceptEncoder,
    NoiseTensor,
    SecretMapper,
    perturb_noise,
    perturb_prompt,
    secret_mapper_forward,
)
from .errors import (
    ConceptAlreadyTrained,
    ConfigError,
    NonFiniteLoss,
    UnknownConcept,
)
from .generation import (
    ToyGeneratorBackend,
    TokenEmbeddingTable,
    embed_prompt,
    pooled_condition,
)
from .objectives import LossBreakdown, LossWeights, loss_ce, loss_csd, loss_l2_image, loss_l2_latent, loss_reg, loss_total
from .registry import Registry, registry_to_dict
from .retrieval import RetrievalNet, ToyFeatureBackbone
from .serialization import blob_sha256, hash_module, load_checkpoint, save_checkpoint

NEGATIVE_MODES = ("complement", "uniform", "off")


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay_gamma: float = 0.95
    lr_decay_every: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    n_bits: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    eval_every: int = 0
    multi_mix: float = 0.5
    negative_mode: str = "complement"
    sequential_new_mix: float = 0.5
    mapper_gain: float = 1.0
    hidden_width_multiplier: int = 4

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.lr_decay_gamma <= 1:
            raise ConfigError("lr_decay_gamma must be in (0, 1]")
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be positive")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ConfigError(f"negative_mode must be one of {NEGATIVE_MODES}")
        if not 0 <= self.multi_mix <= 1 or not 0 <= self.sequential_new_mix <= 1:
            raise ConfigError("mixing ratios must be in [0, 1]")


@dataclass
class BatchItem:
    prompt: str
    targets: list
    z: torch.Tensor


@dataclass
class ModelState:
    concept_encoder: ConceptEncoder
    secret_mapper: SecretMapper
    retriever: RetrievalNet
    decoder: nn.Linear
    backbone: ToyFeatureBackbone
    backend: ToyGeneratorBackend
    table: TokenEmbeddingTable
    registry: Registry
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    trained_concepts: list = field(default_factory=list)
    registry_hash: str = ""
    loss_log: list = field(default_factory=list)
    _query_feats: dict = field(default_factory=dict)

    def trainable_groups(self) -> dict:
        return {
            "concept_encoder": self.concept_encoder,
            "secret_mapper": self.secret_mapper,
            "retriever": self.retriever,
            "decoder": self.decoder,
        }

    def trainable_parameters(self):
        for module in self.trainable_groups().values():
            yield from module.parameters()

    def query_text_features(self, concept_id: str) -> torch.Tensor:
        feats = self._query_feats.get(concept_id)
        if feats is None:
            query = self.registry.render_query(concept_id)
            with torch.no_grad():
                feats = self.backbone.text_features(query, self.table)
            self._query_feats[concept_id] = feats
        return feats


def registry_hash(registry: Registry) -> str:
    payload = json.dumps(registry_to_dict(registry), sort_keys=True).encode("utf-8")
    return blob_sha256(payload)


def build_model_state(config: TrainConfig, registry: Registry,
                      backend: ToyGeneratorBackend, backbone: ToyFeatureBackbone,
                      table: TokenEmbeddingTable, dtype=torch.float32) -> ModelState:
    if len(registry) == 0:
        raise ConfigError("registry is empty")
    if registry.n_bits != config.n_bits:
        raise ConfigError(
            f"registry n_bits {registry.n_bits} does not match config {config.n_bits}"
        )
    torch.manual_seed(config.seed)
    d = table.dim
    encoder = ConceptEncoder(d, config.n_bits,
                             hidden_mult=config.hidden_width_multiplier, dtype=dtype)
    mapper = SecretMapper(config.n_bits, backend.latent_shape,
                          gain=config.mapper_gain, dtype=dtype)
    retriever = RetrievalNet(d_img=backbone.d_img, d_txt=backbone.d_txt, d_out=d,
                             dtype=dtype)
    decoder = nn.Linear(d, config.n_bits, dtype=dtype)
    params = (list(encoder.parameters()) + list(mapper.parameters())
              + list(retriever.parameters()) + list(decoder.parameters()))
    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2))
    return ModelState(
        concept_encoder=encoder,
        secret_mapper=mapper,
        retriever=retriever,
        decoder=decoder,
        backbone=backbone,
        backend=backend,
        table=table,
        registry=registry,
        optimizer=optimizer,
        config=config,
        trained_concepts=sorted(registry.concept_ids()),
        registry_hash=registry_hash(registry),
    )


def _pick(seq, gen):
    return seq[torch.randint(0, len(seq), (), generator=gen).item()]


def sample_batch(registry: Registry, config: TrainConfig, gen: torch.Generator,
                 latent_shape, dtype=torch.float32, new_pool=None,
                 new_mix: float = 0.0) -> list:
    """Draw one batch of (prompt, targets, noise) items.

    Each item is a single concept or an object+style pair rendered into a
    training-split template. When new_pool is set, items include one of
    those concepts with probability new_mix (sequential fine-tuning).
    """
    objects = [cid for cid in registry.concept_ids()
               if registry.get(cid).kind in ("object", "general")]
    styles = [cid for cid in registry.concept_ids() if registry.get(cid).kind == "style"]
    multi_possible = bool(objects) and bool(styles)
    multi_train = templates.train_indices(templates.MULTI_TEMPLATES)

    items = []
    for _ in range(config.batch_size):
        forced = None
        if new_pool and torch.rand((), generator=gen).item() < new_mix:
            forced = _pick(list(new_pool), gen)
        use_multi = multi_possible and torch.rand((), generator=gen).item() < config.multi_mix
        if use_multi:
            obj = _pick(objects, gen)
            sty = _pick(styles, gen)
            if forced is not None:
                if registry.get(forced).kind == "style":
                    sty = forced
                else:
                    obj = forced
            tpl = templates.MULTI_TEMPLATES[_pick(multi_train, gen)]
            prompt = tpl.format(object=registry.get(obj).token,
                                style=registry.get(sty).token)
            targets = [obj, sty]
        else:
            cid = forced if forced is not None else _pick(registry.concept_ids(), gen)
            record = registry.get(cid)
            bank = templates.BANKS[record.kind]
            tpl = bank[_pick(templates.train_indices(bank), gen)]
            prompt = tpl.format(record.token)
            targets = [cid]
        z = torch.randn(latent_shape, generator=gen, dtype=dtype)
        items.append(BatchItem(prompt=prompt, targets=targets, z=z))
    return items


def _pad_text(feats_list):
    d = feats_list[0].shape[-1]
    lmax = max(f.shape[0] for f in feats_list)
    dtype = feats_list[0].dtype
    padded = torch.zeros(len(feats_list), lmax, d, dtype=dtype)
    mask = torch.zeros(len(feats_list), lmax, dtype=torch.bool)
    for i, f in enumerate(feats_list):
        padded[i, :f.shape[0]] = f
        mask[i, :f.shape[0]] = True
    return padded, mask


def compute_loss(state: ModelState, batch: list) -> LossBreakdown:
    """Full forward pass: encode, generate both counterparts, decode, score."""
    cfg = state.config
    registry = state.registry
    dtype = next(state.concept_encoder.parameters()).dtype

    conds_clean, conds_wm, zs, zhats = [], [], [], []
    for item in batch:
        emb = embed_prompt(item.prompt, state.table)
        assignments = {cid: (state.concept_encoder, registry.get(cid).secret)
                       for cid in item.targets}
        emb_wm = perturb_prompt(emb, assignments)
        deltas = [secret_mapper_forward(state.secret_mapper, registry.get(cid).secret)
                  for cid in item.targets]
        z = NoiseTensor(values=item.z.to(dtype))
        z_wm = perturb_noise(z, deltas)
        conds_clean.append(pooled_condition(emb))
        conds_wm.append(pooled_condition(emb_wm))
        zs.append(z.values)
        zhats.append(z_wm.values)

    zs = torch.stack(zs)
    zhats = torch.stack(zhats)
    images_wm = state.backend.sample_batch(zhats, torch.stack(conds_wm))
    with torch.no_grad():
        images_clean = state.backend.sample_batch(zs, torch.stack(conds_clean))

    # decode tasks: positives on watermarked images, negatives (if enabled)
    # reuse the same query against the clean counterpart
    img_rows, txt_rows, bit_targets, positive = [], [], [], []
    feats_wm = state.backbone.image_features_batch(images_wm)
    with torch.no_grad():
        feats_clean = state.backbone.image_features_batch(images_clean)
    for i, item in enumerate(batch):
        for cid in item.targets:
            secret = registry.get(cid).secret
            txt = state.query_text_features(cid)
            img_rows.append(feats_wm[i])
            txt_rows.append(txt)
            bit_targets.append(torch.tensor(secret.bits, dtype=dtype))
            positive.append(cid)
            if cfg.negative_mode == "complement":
                img_rows.append(feats_clean[i])
                txt_rows.append(txt)
                bit_targets.append(torch.tensor(secret.complement().bits, dtype=dtype))
                positive.append(None)
            elif cfg.negative_mode == "uniform":
                img_rows.append(feats_clean[i])
                txt_rows.append(txt)
                bit_targets.append(torch.full((len(secret),), 0.5, dtype=dtype))
                positive.append(None)

    txt_padded, txt_mask = _pad_text(txt_rows)
    embeddings = state.retriever(torch.stack(img_rows), txt_padded, txt_mask)
    logits = state.decoder(embeddings)
    ce = loss_ce(torch.stack(bit_targets), logits)

    pos_idx = [i for i, cid in enumerate(positive) if cid is not None]
    e_true = torch.stack([
        state.table.lookup(registry.get(positive[i]).token).to(dtype) for i in pos_idx
    ])
    reg = loss_reg(e_true, embeddings[pos_idx])

    style_clean = state.backbone.style_features_batch(images_clean)
    style_wm = state.backbone.style_features_batch(images_wm)
    csd = loss_csd(style_clean, style_wm)
    l2_img = loss_l2_image(images_clean, images_wm)
    if cfg.weights.lambda_latent > 0:
        l2_lat = loss_l2_latent(zs, zhats)
    else:
        l2_lat = torch.zeros((), dtype=dtype)
    return loss_total(ce, csd, l2_img, reg, cfg.weights, l2_latent=l2_lat)


def _set_lr(state: ModelState):
    cfg = state.config
    lr = cfg.learning_rate * cfg.lr_decay_gamma ** (state.step // cfg.lr_decay_every)
    for group in state.optimizer.param_groups:
        group["lr"] = lr


def train_step(state: ModelState, batch: list):
    breakdown = compute_loss(state, batch)
    if not torch.isfinite(breakdown.total):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}: {breakdown.floats()}")
    _set_lr(state)
    state.optimizer.zero_grad()
    breakdown.total.backward()
    if state.config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(list(state.trainable_parameters()),
                                       state.config.grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, breakdown


def _checkpoint_groups(state: ModelState) -> dict:
    return {name: {k: v for k, v in module.state_dict().items()}
            for name, module in state.trainable_groups().items()}


def save_model_state(state: ModelState, dirpath) -> None:
    manifest = {
        "kind": "model",
        "step": state.step,
        "n_bits": state.config.n_bits,
        "embedding_dim": state.table.dim,
        "d_img": state.backbone.d_img,
        "d_txt": state.backbone.d_txt,
        "latent_shape": list(state.backend.latent_shape),
        "mapper_gain": state.config.mapper_gain,
        "hidden_width_multiplier": state.config.hidden_width_multiplier,
        "trained_concepts": list(state.trained_concepts),
        "config": asdict(state.config),
        "registry_sha256": state.registry_hash,
        "backbone_sha256": hash_module(state.backbone),
        "denoiser_sha256": hash_module(state.backend.denoiser),
    }
    save_checkpoint(dirpath, _checkpoint_groups(state), manifest)


def load_model_state(dirpath, registry: Registry, backend: ToyGeneratorBackend,
                     backbone: ToyFeatureBackbone, table: TokenEmbeddingTable,
                     dtype=torch.float32) -> ModelState:
    manifest, groups = load_checkpoint(dirpath)
    config = TrainConfig(**manifest["config"])
    state = build_model_state(config, registry, backend, backbone, table, dtype=dtype)
    for name, module in state.trainable_groups().items():
        module.load_state_dict(groups[name])
    state.step = manifest["step"]
    state.trained_concepts = list(manifest["trained_concepts"])
    state.registry_hash = manifest["registry_sha256"]
    return state


def train(config: TrainConfig, registry: Registry, backend: ToyGeneratorBackend,
          backbone: ToyFeatureBackbone, table: TokenEmbeddingTable,
          outdir=None, log_path=None, dtype=torch.float32,
          eval_fn=None) -> ModelState:
    """Run the full training loop; checkpoints land under outdir when given."""
    state = build_model_state(config, registry, backend, backbone, table, dtype=dtype)
    data_rng = torch.Generator().manual_seed(config.seed + 7919)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for _ in range(config.iterations):
            batch = sample_batch(registry, config, data_rng, backend.latent_shape, dtype)
            state, breakdown = train_step(state, batch)
            record = {"step": state.step, **breakdown.floats()}
            state.loss_log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if outdir and config.checkpoint_every > 0 and state.step % config.checkpoint_every == 0:
                save_model_state(state, f"{outdir}/step_{state.step:06d}")
            if eval_fn and config.eval_every > 0 and state.step % config.eval_every == 0:
                eval_fn(state)
    finally:
        if log_fh:
            log_fh.close()
    if outdir:
        save_model_state(state, f"{outdir}/final")
    return state


def sequential_update(state: ModelState, new_concepts, extra_fraction: float = 0.10,
                      outdir=None, dtype=torch.float32) -> ModelState:
    """Fine-tune an existing model on a mix of old and newly added concepts
    for a fraction of the original budget."""
    for cid in new_concepts:
        if cid not in state.registry:
            raise UnknownConcept(f"concept {cid!r} is not registered")
        if cid in state.trained_concepts:
            raise ConceptAlreadyTrained(f"concept {cid!r} was already trained")
    config = state.config
    extra_steps = max(1, round(extra_fraction * config.iterations))
    data_rng = torch.Generator().manual_seed(config.seed + 104729 + state.step)
    state._query_feats.clear()
    for _ in range(extra_steps):
        batch = sample_batch(state.registry, config, data_rng, state.backend.latent_shape,
                             dtype, new_pool=list(new_concepts),
                             new_mix=config.sequential_new_mix)
        state, breakdown = train_step(state, batch)
        state.loss_log.append({"step": state.step, **breakdown.floats()})
    state.trained_concepts = sorted(state.trained_concepts + list(new_concepts))
    if outdir:
        save_model_state(state, f"{outdir}/final")
    return state


GRAD_AUDIT_FLOOR = 1e-6


def gradient_audit(state: ModelState, batch: list, samples_per_group: int = 4,
                   h: float = None) -> dict:
    """Central finite-difference check of analytic gradients.

    Audits the largest-magnitude gradient coordinates of every trainable
    group. Relative error uses a denominator floor: coordinates whose true
    derivative sits below the floor (e.g. the structurally shift-invariant
    key bias of the attention) are compared absolutely against it.
    """
    dtype = next(state.concept_encoder.parameters()).dtype
    if h is None:
        h = 1e-5 if dtype == torch.float64 else 1e-2
    state.optimizer.zero_grad()
    breakdown = compute_loss(state, batch)
    breakdown.total.backward()

    report = {"groups": {}, "max_rel_err": 0.0, "h": h}
    for name, module in state.trainable_groups().items():
        candidates = []
        for param in module.parameters():
            if param.grad is None:
                continue
            grad_flat = param.grad.reshape(-1)
            for idx in grad_flat.abs().argsort(descending=True)[:samples_per_group].tolist():
                candidates.append((abs(grad_flat[idx].item()), param, idx))
        candidates.sort(key=lambda c: c[0], reverse=True)
        worst = 0.0
        for _, param, idx in candidates[:samples_per_group]:
            flat = param.detach().reshape(-1)
            analytic = param.grad.reshape(-1)[idx].item()
            with torch.no_grad():
                original = flat[idx].item()
                flat[idx] = original + h
                plus = compute_loss(state, batch).total.item()
                flat[idx] = original - h
                minus = compute_loss(state, batch).total.item()
                flat[idx] = original
            fd = (plus - minus) / (2 * h)
            denom = max(abs(fd), abs(analytic), GRAD_AUDIT_FLOOR)
            worst = max(worst, abs(fd - analytic) / denom)
        report["groups"][name] = worst
        report["max_rel_err"] = max(report["max_rel_err"], worst)
    state.optimizer.zero_grad()
    return report
