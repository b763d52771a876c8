import json

import pytest
import torch

from conceptmark.errors import (
    ConceptAlreadyTrained,
    ConfigError,
    NonFiniteLoss,
    UnknownConcept,
)
from conceptmark.generation import (
    GeneratorConfig,
    TokenEmbeddingTable,
    ToyDenoiser,
    ToyGeneratorBackend,
)
from conceptmark.objectives import LossWeights
from conceptmark.registry import Registry
from conceptmark.retrieval import ToyFeatureBackbone
from conceptmark.training import (
    TrainConfig,
    _set_lr,
    build_model_state,
    compute_loss,
    gradient_audit,
    load_model_state,
    registry_hash,
    sample_batch,
    save_model_state,
    sequential_update,
    train,
    train_step,
)


def tiny_stack(dtype=torch.float32, dim=16, image_size=16, seed=0):
    table = TokenEmbeddingTable(dim=dim, seed=seed, dtype=dtype)
    gcfg = GeneratorConfig(image_size=image_size, channels=8, blocks=1,
                           embedding_dim=dim, seed=seed)
    torch.manual_seed(seed)
    denoiser = ToyDenoiser(channels=8, blocks=1, embedding_dim=dim,
                           image_size=image_size, dtype=dtype)
    for p in denoiser.parameters():
        p.requires_grad_(False)
    backend = ToyGeneratorBackend(denoiser, gcfg, dtype=dtype)
    backbone = ToyFeatureBackbone(embedding_dim=dim, d_img=24, d_txt=dim,
                                  width=8, dtype=dtype).freeze()
    return table, backend, backbone


def tiny_registry(table, n_bits=4, seed=0):
    registry = Registry(n_bits=n_bits, seed=seed, min_hamming=1)
    for token, kind, base in (("<obj-circle>", "object", "circle"),
                              ("<sty-crimson>", "style", "crimson")):
        rec = registry.register_concept(token, kind)
        table.add_pseudo_token(token, rec.concept_id, base)
    return registry


def tiny_config(**kw):
    base = dict(iterations=2, batch_size=2, learning_rate=1e-3, n_bits=4,
                seed=0, checkpoint_every=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [
        {"iterations": 0},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"lr_decay_gamma": 0.0},
        {"lr_decay_gamma": 1.5},
        {"lr_decay_every": 0},
        {"negative_mode": "flip"},
        {"multi_mix": 1.5},
        {"sequential_new_mix": -0.1},
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ConfigError):
            tiny_config(**kw)

    def test_weights_dict_coerced(self):
        cfg = tiny_config(weights={"lambda1": 2.0})
        assert isinstance(cfg.weights, LossWeights)
        assert cfg.weights.lambda1 == 2.0

    def test_gamma_of_one_allowed(self):
        assert tiny_config(lr_decay_gamma=1.0).lr_decay_gamma == 1.0


class TestBuildModelState:
    def test_components_sized_from_inputs(self):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        state = build_model_state(tiny_config(), registry, backend, backbone, table)
        assert state.decoder.out_features == 4
        assert state.decoder.in_features == table.dim
        assert state.retriever.d_img == backbone.d_img
        assert state.step == 0
        assert state.trained_concepts == sorted(registry.concept_ids())
        assert state.registry_hash == registry_hash(registry)

    def test_rejects_empty_registry(self):
        table, backend, backbone = tiny_stack()
        registry = Registry(n_bits=4, seed=0)
        with pytest.raises(ConfigError):
            build_model_state(tiny_config(), registry, backend, backbone, table)

    def test_rejects_bit_length_mismatch(self):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table, n_bits=8)
        with pytest.raises(ConfigError):
            build_model_state(tiny_config(n_bits=4), registry, backend, backbone, table)

    def test_registry_hash_tracks_content(self):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        h1 = registry_hash(registry)
        registry.register_concept("<obj-square>", "object")
        assert registry_hash(registry) != h1


class TestSampleBatch:
    def _setup(self):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        return registry, backend.latent_shape

    def test_batch_size_and_noise_shape(self):
        registry, latent = self._setup()
        gen = torch.Generator().manual_seed(0)
        batch = sample_batch(registry, tiny_config(batch_size=5), gen, latent)
        assert len(batch) == 5
        for item in batch:
            assert tuple(item.z.shape) == latent
            assert all(cid in registry for cid in item.targets)
            for cid in item.targets:
                assert registry.get(cid).token in item.prompt.split()

    def test_deterministic_given_generator_seed(self):
        registry, latent = self._setup()
        a = sample_batch(registry, tiny_config(), torch.Generator().manual_seed(3), latent)
        b = sample_batch(registry, tiny_config(), torch.Generator().manual_seed(3), latent)
        assert [i.prompt for i in a] == [i.prompt for i in b]
        assert all(torch.equal(x.z, y.z) for x, y in zip(a, b))

    def test_multi_mix_one_always_pairs(self):
        registry, latent = self._setup()
        gen = torch.Generator().manual_seed(1)
        batch = sample_batch(registry, tiny_config(batch_size=8, multi_mix=1.0),
                             gen, latent)
        for item in batch:
            kinds = {registry.get(c).kind for c in item.targets}
            assert kinds == {"object", "style"}

    def test_multi_mix_zero_is_single_target(self):
        registry, latent = self._setup()
        gen = torch.Generator().manual_seed(1)
        batch = sample_batch(registry, tiny_config(batch_size=8, multi_mix=0.0),
                             gen, latent)
        assert all(len(item.targets) == 1 for item in batch)

    def test_new_pool_forced_at_full_mix(self):
        registry, latent = self._setup()
        rec = registry.register_concept("<obj-square>", "object")
        gen = torch.Generator().manual_seed(2)
        batch = sample_batch(registry, tiny_config(batch_size=8, multi_mix=0.0),
                             gen, latent, new_pool=[rec.concept_id], new_mix=1.0)
        assert all(item.targets == [rec.concept_id] for item in batch)


class TestTrainingLoop:
    def _state(self, **cfg_kw):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        config = tiny_config(**cfg_kw)
        return build_model_state(config, registry, backend, backbone, table), registry

    def test_initial_perturbations_are_neutral(self):
        state, registry = self._state()
        gen = torch.Generator().manual_seed(0)
        batch = sample_batch(registry, state.config, gen, state.backend.latent_shape)
        breakdown = compute_loss(state, batch)
        # zero-initialized output layers: watermarked pass equals clean pass
        assert float(breakdown.csd.detach()) == 0.0
        assert float(breakdown.l2_image.detach()) == 0.0

    def test_lr_decay_closed_form(self):
        state, _ = self._state(learning_rate=1e-3, lr_decay_gamma=0.5,
                               lr_decay_every=10)
        for step, expected in ((0, 1e-3), (9, 1e-3), (10, 5e-4), (25, 2.5e-4)):
            state.step = step
            _set_lr(state)
            for group in state.optimizer.param_groups:
                assert group["lr"] == pytest.approx(expected, rel=1e-12)

    def test_train_step_advances_and_updates(self):
        state, registry = self._state()
        gen = torch.Generator().manual_seed(0)
        batch = sample_batch(registry, state.config, gen, state.backend.latent_shape)
        before = [p.clone() for p in state.trainable_parameters()]
        state, breakdown = train_step(state, batch)
        assert state.step == 1
        assert torch.isfinite(breakdown.total)
        changed = any(not torch.equal(p, q)
                      for p, q in zip(state.trainable_parameters(), before))
        assert changed

    def test_nonfinite_loss_raises(self):
        state, registry = self._state()
        with torch.no_grad():
            state.decoder.weight.fill_(float("nan"))
        gen = torch.Generator().manual_seed(0)
        batch = sample_batch(registry, state.config, gen, state.backend.latent_shape)
        with pytest.raises(NonFiniteLoss):
            train_step(state, batch)

    def test_train_writes_log_and_checkpoints(self, tmp_path):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        config = tiny_config(iterations=4, checkpoint_every=2)
        log_path = tmp_path / "loss.jsonl"
        state = train(config, registry, backend, backbone, table,
                      outdir=str(tmp_path), log_path=str(log_path))
        assert state.step == 4
        assert len(state.loss_log) == 4
        lines = log_path.read_text().strip().splitlines()
        assert len(lines) == 4
        assert json.loads(lines[0])["step"] == 1
        assert (tmp_path / "step_000002" / "manifest.json").exists()
        assert (tmp_path / "final" / "manifest.json").exists()

    def test_eval_hook_called(self, tmp_path):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        config = tiny_config(iterations=4, eval_every=2)
        seen = []
        train(config, registry, backend, backbone, table,
              eval_fn=lambda s: seen.append(s.step))
        assert seen == [2, 4]


class TestSaveLoad:
    def test_round_trip_restores_weights(self, tmp_path):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        state = build_model_state(tiny_config(), registry, backend, backbone, table)
        gen = torch.Generator().manual_seed(0)
        for _ in range(2):
            batch = sample_batch(registry, state.config, gen, backend.latent_shape)
            state, _ = train_step(state, batch)
        save_model_state(state, tmp_path / "ckpt")
        loaded = load_model_state(tmp_path / "ckpt", registry, backend, backbone, table)
        assert loaded.step == 2
        assert loaded.trained_concepts == state.trained_concepts
        for name, module in state.trainable_groups().items():
            other = loaded.trainable_groups()[name]
            for (k, v), (k2, v2) in zip(module.state_dict().items(),
                                        other.state_dict().items()):
                assert k == k2
                assert torch.equal(v, v2)

    def test_manifest_records_frozen_hashes(self, tmp_path):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        state = build_model_state(tiny_config(), registry, backend, backbone, table)
        save_model_state(state, tmp_path / "ckpt")
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        assert manifest["kind"] == "model"
        assert manifest["registry_sha256"] == registry_hash(registry)
        assert len(manifest["backbone_sha256"]) == 64
        assert len(manifest["denoiser_sha256"]) == 64


class TestSequentialUpdate:
    def _trained_state(self):
        table, backend, backbone = tiny_stack()
        registry = tiny_registry(table)
        config = tiny_config(iterations=10)
        state = train(config, registry, backend, backbone, table)
        return state, registry, table

    def test_rejects_unregistered_concept(self):
        state, _, _ = self._trained_state()
        with pytest.raises(UnknownConcept):
            sequential_update(state, ["ghost"])

    def test_rejects_already_trained_concept(self):
        state, _, _ = self._trained_state()
        with pytest.raises(ConceptAlreadyTrained):
            sequential_update(state, ["obj-circle"])

    def test_adds_concept_with_fractional_budget(self):
        state, registry, table = self._trained_state()
        rec = registry.register_concept("<obj-square>", "object")
        table.add_pseudo_token("<obj-square>", rec.concept_id, "square")
        before = state.step
        state = sequential_update(state, [rec.concept_id], extra_fraction=0.2)
        assert state.step == before + 2  # round(0.2 * 10)
        assert rec.concept_id in state.trained_concepts


class TestGradientAudit:
    def test_analytic_gradients_match_finite_differences(self):
        table, backend, backbone = tiny_stack(dtype=torch.float64)
        registry = tiny_registry(table)
        config = tiny_config(batch_size=2)
        state = build_model_state(config, registry, backend, backbone, table,
                                  dtype=torch.float64)
        gen = torch.Generator().manual_seed(0)
        # audit after a few steps so the encoder outputs are nonzero
        for _ in range(3):
            batch = sample_batch(registry, config, gen, backend.latent_shape,
                                 dtype=torch.float64)
            state, _ = train_step(state, batch)
        batch = sample_batch(registry, config, gen, backend.latent_shape,
                             dtype=torch.float64)
        report = gradient_audit(state, batch, samples_per_group=3)
        assert set(report["groups"]) == {"concept_encoder", "secret_mapper",
                                         "retriever", "decoder"}
        assert report["max_rel_err"] < 1e-4
