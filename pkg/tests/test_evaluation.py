import json
from types import SimpleNamespace

import pytest
import torch

from conceptmark import templates
from conceptmark.errors import (
    ConfigError,
    InsufficientData,
    LengthMismatch,
    UnknownConcept,
)
from conceptmark.evaluation import (
    FULL_SCALE_REFERENCE,
    MetricsReport,
    _median,
    attribution_accuracy,
    bit_accuracy,
    build_multiconcept_samples,
    clean_prompts,
    comprehensive_test,
    concept_prompts,
    ensure_pseudo_tokens,
    evaluate_single,
    factor_word,
    fidelity_eval,
    fidelity_scores,
    generate_clean,
    generate_watermarked,
    multiconcept_eval,
    passive_baseline_accuracy,
    passive_baseline_attribute,
    passive_gallery,
    plot_report,
    random_decoder_sanity,
    register_grid_concepts,
    robustness_sweep,
    write_report,
)
from conceptmark.distortions import DistortionSpec
from conceptmark.generation import (
    OOV_TOKEN,
    GeneratorConfig,
    ImageTensor,
    TokenEmbeddingTable,
    ToyDenoiser,
    ToyGeneratorBackend,
)
from conceptmark.registry import Registry, Secret
from conceptmark.retrieval import ToyFeatureBackbone
from conceptmark.training import TrainConfig, build_model_state


def tiny_state(n_bits=4, seed=0):
    """Untrained model state over a tiny untrained stack; the zero-initialized
    insertion networks make watermarked outputs equal clean outputs."""
    dim = 16
    table = TokenEmbeddingTable(dim=dim, seed=seed)
    gcfg = GeneratorConfig(image_size=16, channels=8, blocks=1,
                           embedding_dim=dim, seed=seed)
    torch.manual_seed(seed)
    denoiser = ToyDenoiser(channels=8, blocks=1, embedding_dim=dim, image_size=16)
    for p in denoiser.parameters():
        p.requires_grad_(False)
    backend = ToyGeneratorBackend(denoiser, gcfg)
    backbone = ToyFeatureBackbone(embedding_dim=dim, d_img=24, d_txt=dim,
                                  width=8).freeze()
    registry = Registry(n_bits=n_bits, seed=seed, min_hamming=1)
    object_ids, style_ids = register_grid_concepts(registry, table,
                                                   n_object=2, n_style=2)
    config = TrainConfig(iterations=1, batch_size=2, n_bits=n_bits, seed=seed)
    state = build_model_state(config, registry, backend, backbone, table)
    return state, object_ids, style_ids


def rand_images(n, seed=0, size=32):
    gen = torch.Generator().manual_seed(seed)
    return [ImageTensor(values=torch.rand(3, size, size, generator=gen))
            for _ in range(n)]


class TestCoreMetrics:
    def test_bit_accuracy_counts_matches(self):
        a = Secret((1, 0, 1, 1))
        b = Secret((1, 1, 1, 0))
        assert bit_accuracy(a, b) == 0.5
        assert bit_accuracy(a, a) == 1.0
        assert bit_accuracy(a, a.complement()) == 0.0

    def test_bit_accuracy_accepts_iterables(self):
        assert bit_accuracy((1, 0, 1), [1, 0, 0]) == pytest.approx(2 / 3)

    def test_bit_accuracy_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            bit_accuracy((1, 0), (1, 0, 1))

    def test_attribution_accuracy_exact_matches_only(self):
        results = [SimpleNamespace(bit_accuracy=v) for v in (1.0, 0.875, 1.0, 0.5)]
        assert attribution_accuracy(results) == 0.5

    def test_attribution_accuracy_empty(self):
        with pytest.raises(InsufficientData):
            attribution_accuracy([])

    def test_fidelity_identical_images_is_exactly_one(self):
        backbone = ToyFeatureBackbone(embedding_dim=16, d_img=24, d_txt=16,
                                      width=8).freeze()
        images = rand_images(3)
        csd, sem = fidelity_scores(backbone, images, list(images))
        assert csd == 1.0
        assert sem == 1.0

    def test_fidelity_rejects_mismatched_lists(self):
        backbone = ToyFeatureBackbone(embedding_dim=16, d_img=24, d_txt=16,
                                      width=8).freeze()
        with pytest.raises(LengthMismatch):
            fidelity_scores(backbone, rand_images(2), rand_images(3))
        with pytest.raises(LengthMismatch):
            fidelity_scores(backbone, [], [])

    def test_median(self):
        assert _median([3.0, 1.0, 2.0]) == 2.0
        assert _median([4.0, 1.0, 2.0, 3.0]) == 2.5

    def test_factor_word(self):
        assert factor_word("<obj-circle>") == "circle"
        assert factor_word("<sty-crimson>") == "crimson"
        assert factor_word("circle") == "circle"


class TestGenerationHelpers:
    def test_watermarked_generation_deterministic(self):
        state, object_ids, _ = tiny_state()
        cid = object_ids[0]
        prompt = concept_prompts(state.registry, cid, 1)[0]
        a = generate_watermarked(state, [(prompt, [cid])], seed=3)
        b = generate_watermarked(state, [(prompt, [cid])], seed=3)
        assert torch.equal(a[0].values, b[0].values)
        assert a[0].provenance == {"concepts": [cid], "seed": 3,
                                   "prompt": prompt, "alpha": 1.0}

    def test_untrained_watermark_equals_clean(self):
        state, object_ids, _ = tiny_state()
        cid = object_ids[0]
        prompt = concept_prompts(state.registry, cid, 1)[0]
        wm = generate_watermarked(state, [(prompt, [cid])], seed=5)
        clean = generate_clean(state.backend, state.table, [prompt], seed=5)
        assert torch.equal(wm[0].values, clean[0].values)

    def test_clean_provenance_has_no_concepts(self):
        state, _, _ = tiny_state()
        images = generate_clean(state.backend, state.table, ["a circle"], seed=2)
        assert images[0].provenance["concepts"] == []
        assert images[0].provenance["seed"] == 2

    def test_seed_offsets_per_job(self):
        state, object_ids, _ = tiny_state()
        cid = object_ids[0]
        prompt = concept_prompts(state.registry, cid, 1)[0]
        images = generate_watermarked(state, [(prompt, [cid])] * 3, seed=10)
        assert [img.provenance["seed"] for img in images] == [10, 11, 12]
        assert not torch.equal(images[0].values, images[1].values)

    def test_concept_prompts_use_token_and_split(self):
        state, object_ids, _ = tiny_state()
        cid = object_ids[0]
        token = state.registry.get(cid).token
        prompts = concept_prompts(state.registry, cid, 5, split="eval")
        assert len(prompts) == 5
        assert all(token in p.split() for p in prompts)
        bank = templates.BANKS["object"]
        eval_templates = {bank[i] for i in templates.eval_indices(bank)}
        assert {p.replace(token, "{}") for p in prompts} <= eval_templates

    def test_concept_prompts_unknown_split(self):
        state, object_ids, _ = tiny_state()
        with pytest.raises(ConfigError):
            concept_prompts(state.registry, object_ids[0], 2, split="test")

    def test_clean_prompts_cycle_concepts_without_tokens(self):
        state, _, _ = tiny_state()
        pairs = clean_prompts(state.registry, 6)
        assert len(pairs) == 6
        cids = state.registry.concept_ids()
        for i, (prompt, cid) in enumerate(pairs):
            assert cid == cids[i % len(cids)]
            token = state.registry.get(cid).token
            assert token not in prompt
            assert factor_word(token) in prompt.split()


class TestEvaluationProtocols:
    def test_evaluate_single_shape(self):
        state, object_ids, style_ids = tiny_state()
        ev = evaluate_single(state, images_per_concept=2, seed=0)
        cids = state.registry.concept_ids()
        assert set(ev["per_concept"]) == set(cids)
        assert len(ev["images"]) == 2 * len(cids)
        assert len(ev["results"]) == 2 * len(cids)
        assert 0.0 <= ev["bit_accuracy"] <= 1.0
        assert 0.0 <= ev["attribution_accuracy"] <= 1.0

    def test_fidelity_eval_is_perfect_before_training(self):
        state, _, _ = tiny_state()
        csd, sem = fidelity_eval(state, images_per_concept=1, seed=0)
        assert csd == 1.0
        assert sem == 1.0

    def test_comprehensive_counts_are_consistent(self):
        state, object_ids, _ = tiny_state()
        cid = object_ids[0]
        prompt = concept_prompts(state.registry, cid, 1)[0]
        wm = [(img, cid) for img in generate_watermarked(
            state, [(prompt, [cid])] * 3, seed=0)]
        clean = [(img, cid) for img in generate_clean(
            state.backend, state.table, [prompt] * 4, seed=100)]
        out = comprehensive_test(state, state.registry, wm, clean)
        assert out["tp"] + out["fn"] == 3
        assert out["fp"] + out["tn"] == 4
        assert out["tpr"] == out["tp"] / 3
        assert out["fpr"] == out["fp"] / 4
        assert out["n_wm"] == 3 and out["n_clean"] == 4
        assert 0.0 <= out["f1"] <= 1.0

    def test_comprehensive_requires_both_sets(self):
        state, object_ids, _ = tiny_state()
        with pytest.raises(InsufficientData):
            comprehensive_test(state, state.registry, [], [(rand_images(1)[0], "x")])

    def test_random_decoder_sits_near_chance(self):
        state, _, _ = tiny_state(n_bits=8)
        images = [ImageTensor(values=v.values) for v in rand_images(8, size=16)]
        acc = random_decoder_sanity(state.backbone, state.table, state.registry,
                                    images, n_seeds=4, images_per_seed=8)
        assert 0.25 <= acc <= 0.75

    def test_robustness_identity_row_matches_none(self):
        state, object_ids, _ = tiny_state()
        cid = object_ids[0]
        prompt = concept_prompts(state.registry, cid, 1)[0]
        pairs = [(img, cid) for img in generate_watermarked(
            state, [(prompt, [cid])] * 2, seed=0)]
        suite = [DistortionSpec("gaussian_noise", {"sigma": 0.0})]
        table = robustness_sweep(state, state.registry, pairs, suite=suite)
        assert set(table) == {"none", "gaussian_noise(sigma=0.0)"}
        assert table["none"] == table["gaussian_noise(sigma=0.0)"]


class TestMultiConcept:
    def test_sample_grid(self):
        state, object_ids, style_ids = tiny_state()
        samples = build_multiconcept_samples(state.registry, object_ids,
                                             style_ids, per_pair=2)
        assert len(samples) == len(object_ids) * len(style_ids) * 2
        for s in samples:
            obj, sty = s.targets
            assert state.registry.get(obj).kind == "object"
            assert state.registry.get(sty).kind == "style"
            words = s.prompt.split()
            assert state.registry.get(obj).token in words
            assert state.registry.get(sty).token in words

    def test_eval_report_shape(self):
        state, object_ids, style_ids = tiny_state()
        samples = build_multiconcept_samples(state.registry, object_ids[:1],
                                             style_ids[:1])
        report = multiconcept_eval(state, state.registry, samples)
        assert report["variant"] == "plain"
        assert report["alpha"] == 1.0
        assert report["n_samples"] == 1
        assert len(report["per_sample"]) == 1
        assert set(report["per_concept"]) == {object_ids[0], style_ids[0]}
        assert len(report["_images"]) == 1
        assert len(report["_results"]) == 2

    def test_prompt_weighted_variant_records_alpha(self):
        state, object_ids, style_ids = tiny_state()
        samples = build_multiconcept_samples(state.registry, object_ids[:1],
                                             style_ids[:1])
        report = multiconcept_eval(state, state.registry, samples,
                                   variant="prompt_weighted", alpha=1.3)
        assert report["alpha"] == 1.3

    def test_unknown_variant(self):
        state, object_ids, style_ids = tiny_state()
        samples = build_multiconcept_samples(state.registry, object_ids[:1],
                                             style_ids[:1])
        with pytest.raises(ConfigError):
            multiconcept_eval(state, state.registry, samples, variant="mixed")

    def test_unregistered_target(self):
        state, object_ids, style_ids = tiny_state()
        samples = build_multiconcept_samples(state.registry, object_ids[:1],
                                             style_ids[:1])
        samples[0].targets[0] = "ghost"
        with pytest.raises(UnknownConcept):
            multiconcept_eval(state, state.registry, samples)


class TestPassiveBaseline:
    def _backbone(self):
        torch.manual_seed(0)
        return ToyFeatureBackbone(embedding_dim=16, d_img=24, d_txt=16,
                                  width=8).freeze()

    def test_gallery_centroids(self):
        backbone = self._backbone()
        imgs = rand_images(4)
        gallery = passive_gallery(backbone, {"a": imgs[:2], "b": imgs[2:]})
        expected = torch.stack([backbone.semantic_features(i) for i in imgs[:2]]
                               ).mean(dim=0)
        assert torch.allclose(gallery["a"], expected)

    def test_gallery_guards(self):
        backbone = self._backbone()
        with pytest.raises(InsufficientData):
            passive_gallery(backbone, {})
        with pytest.raises(InsufficientData):
            passive_gallery(backbone, {"a": []})

    def test_attribute_picks_own_reference(self):
        backbone = self._backbone()
        imgs = rand_images(2)
        gallery = passive_gallery(backbone, {"a": [imgs[0], imgs[0]],
                                             "b": [imgs[1], imgs[1]]})
        assert passive_baseline_attribute(backbone, gallery, imgs[0]) == "a"
        assert passive_baseline_attribute(backbone, gallery, imgs[1]) == "b"

    def test_accuracy_over_pairs(self):
        backbone = self._backbone()
        imgs = rand_images(2)
        gallery = passive_gallery(backbone, {"a": [imgs[0]], "b": [imgs[1]]})
        pairs = [(imgs[0], "a"), (imgs[1], "b"), (imgs[0], "b")]
        assert passive_baseline_accuracy(backbone, gallery, pairs) == pytest.approx(2 / 3)

    def test_accuracy_requires_pairs(self):
        backbone = self._backbone()
        gallery = passive_gallery(backbone, {"a": rand_images(1)})
        with pytest.raises(InsufficientData):
            passive_baseline_accuracy(backbone, gallery, [])


class TestRegistryBootstrap:
    def test_register_grid_concepts(self):
        table = TokenEmbeddingTable(dim=16, seed=0)
        registry = Registry(n_bits=8, seed=0)
        object_ids, style_ids = register_grid_concepts(registry, table, 3, 2)
        assert len(object_ids) == 3 and len(style_ids) == 2
        assert len(registry) == 5
        for cid in object_ids:
            token = registry.get(cid).token
            assert token in table.pseudo
            base = factor_word(token)
            assert torch.equal(table.vectors[token], table.vectors[base])

    def test_register_grid_offsets_give_fresh_words(self):
        table = TokenEmbeddingTable(dim=16, seed=0)
        registry = Registry(n_bits=8, seed=0)
        first, _ = register_grid_concepts(registry, table, 2, 1)
        second, _ = register_grid_concepts(registry, table, 2, 1,
                                           object_offset=2, style_offset=1)
        assert set(first).isdisjoint(second)

    def test_register_grid_exhausts_words(self):
        table = TokenEmbeddingTable(dim=16, seed=0)
        registry = Registry(n_bits=8, seed=0)
        with pytest.raises(ConfigError):
            register_grid_concepts(registry, table, n_object=99, n_style=1)

    def test_ensure_pseudo_tokens_backfills(self):
        table = TokenEmbeddingTable(dim=16, seed=0)
        registry = Registry(n_bits=8, seed=0)
        registry.register_concept("<obj-circle>", "object")
        registry.register_concept("<obj-zzz>", "object")
        ensure_pseudo_tokens(table, registry)
        assert torch.equal(table.vectors["<obj-circle>"], table.vectors["circle"])
        assert torch.equal(table.vectors["<obj-zzz>"], table.vectors[OOV_TOKEN])
        before = dict(table.pseudo)
        ensure_pseudo_tokens(table, registry)  # idempotent
        assert table.pseudo == before


class TestReportOutput:
    def test_metrics_report_to_dict(self):
        report = MetricsReport(experiment_id="exp1", config={"seed": 0},
                               bit_accuracy=0.9, extras={"note": "x"})
        d = report.to_dict()
        assert d["schema_version"] == 1
        assert d["experiment_id"] == "exp1"
        assert d["bit_accuracy"] == 0.9
        assert d["full_scale_reference"] == FULL_SCALE_REFERENCE
        assert d["note"] == "x"
        assert d["created_at"]

    def test_write_report_strips_private_keys(self, tmp_path):
        path = tmp_path / "report.json"
        write_report({"a": 1, "_images": ["x"]}, path)
        data = json.loads(path.read_text())
        assert data == {"a": 1}

    def test_write_report_csv_mirror(self, tmp_path):
        path = tmp_path / "report.json"
        report = {
            "robustness": {
                "none": {"bit_accuracy": 1.0, "attribution_accuracy": 1.0},
                "jpeg(quality=50)": {"bit_accuracy": 0.9, "attribution_accuracy": 0.8},
            },
            "scalar": 3,
        }
        write_report(report, path)
        csv_path = tmp_path / "report.robustness.csv"
        assert csv_path.exists()
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "robustness,attribution_accuracy,bit_accuracy"
        assert len(lines) == 3
        assert not (tmp_path / "report.scalar.csv").exists()

    @pytest.mark.parametrize("report", [
        {"study": "bitlength", "lengths": [5, 16],
         "median_attribution_by_length": [0.9, 0.8]},
        {"study": "scaling", "concept_counts": [4],
         "per_count": {"4": {"attribution_accuracy": 0.9}}},
        {"study": "sequential",
         "stages": [{"stage": 0, "old_attribution_accuracy": 0.9}]},
        {"robustness": {"none": {"bit_accuracy": 1.0}}},
        {"nothing": True},
    ])
    def test_plot_report_writes_file(self, tmp_path, report):
        path = tmp_path / "plot.png"
        plot_report(report, path)
        assert path.exists()
        assert path.stat().st_size > 0
