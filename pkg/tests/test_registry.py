import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptmark.errors import (
    BadLength,
    DuplicateToken,
    IntegrityError,
    ParseError,
    SchemaVersionMismatch,
    SecretCollision,
    TargetNotInPrompt,
    UnknownConcept,
)
from conceptmark.registry import (
    ConceptRecord,
    MultiConceptSample,
    Registry,
    Secret,
    load_multiconcept_dataset,
    load_registry,
    registry_to_dict,
    save_multiconcept_dataset,
    save_registry,
)

bits_strategy = st.lists(st.integers(min_value=0, max_value=1), min_size=1, max_size=64)


class TestSecret:
    def test_coerces_to_int_tuple(self):
        s = Secret((True, 0, 1.0))
        assert s.bits == (1, 0, 1)
        assert all(isinstance(b, int) for b in s.bits)

    def test_rejects_empty(self):
        with pytest.raises(BadLength):
            Secret(())

    def test_rejects_non_binary(self):
        with pytest.raises(BadLength):
            Secret((0, 2, 1))

    @given(bits_strategy)
    def test_complement_involution(self, bits):
        s = Secret(tuple(bits))
        assert s.complement().complement() == s
        assert s.hamming(s.complement()) == len(s)

    @given(bits_strategy, bits_strategy)
    @settings(max_examples=50)
    def test_hamming_oracle(self, a, b):
        if len(a) != len(b):
            with pytest.raises(BadLength):
                Secret(tuple(a)).hamming(Secret(tuple(b)))
            return
        # independent count
        expected = sum(1 for x, y in zip(a, b) if x != y)
        assert Secret(tuple(a)).hamming(Secret(tuple(b))) == expected

    def test_random_is_seed_deterministic(self):
        a = Secret.random(16, random.Random(7))
        b = Secret.random(16, random.Random(7))
        assert a == b
        assert len(a) == 16


class TestRegistration:
    def test_concept_id_defaults_to_stripped_token(self):
        reg = Registry(n_bits=8)
        rec = reg.register_concept("<night-lamp>", "object")
        assert rec.concept_id == "night-lamp"
        assert "night-lamp" in reg

    def test_duplicate_token_rejected(self):
        reg = Registry(n_bits=8)
        reg.register_concept("<a>", "object")
        with pytest.raises(DuplicateToken):
            reg.register_concept("<a>", "style")

    def test_duplicate_concept_id_rejected(self):
        reg = Registry(n_bits=8)
        reg.register_concept("<a>", "object", concept_id="same")
        with pytest.raises(DuplicateToken):
            reg.register_concept("<b>", "object", concept_id="same")

    def test_explicit_secret_length_checked(self):
        reg = Registry(n_bits=8)
        with pytest.raises(BadLength):
            reg.register_concept("<a>", "object", secret=Secret((0, 1)))

    def test_explicit_secret_collision_rejected(self):
        reg = Registry(n_bits=4)
        s = Secret((0, 1, 0, 1))
        reg.register_concept("<a>", "object", secret=s)
        with pytest.raises(SecretCollision):
            reg.register_concept("<b>", "object", secret=Secret((0, 1, 0, 1)))

    def test_secrets_unique_and_seed_deterministic(self):
        reg1 = Registry(n_bits=16, seed=3)
        reg2 = Registry(n_bits=16, seed=3)
        for i in range(12):
            reg1.register_concept(f"<c{i}>", "object")
            reg2.register_concept(f"<c{i}>", "object")
        secrets1 = [reg1.get(c).secret.bits for c in reg1.concept_ids()]
        secrets2 = [reg2.get(c).secret.bits for c in reg2.concept_ids()]
        assert secrets1 == secrets2
        assert len(set(secrets1)) == len(secrets1)

    def test_min_hamming_enforced_on_autodraw(self):
        reg = Registry(n_bits=16, seed=0, min_hamming=4)
        for i in range(8):
            reg.register_concept(f"<c{i}>", "object")
        secrets = [reg.get(c).secret for c in reg.concept_ids()]
        for i, a in enumerate(secrets):
            for b in secrets[i + 1:]:
                assert a.hamming(b) >= 4

    def test_min_hamming_exhaustion_raises(self):
        # 1-bit secrets admit only two distinct values
        reg = Registry(n_bits=1, seed=0)
        reg.register_concept("<a>", "object")
        reg.register_concept("<b>", "object")
        with pytest.raises(SecretCollision):
            reg.register_concept("<c>", "object")

    def test_unknown_kind_rejected(self):
        reg = Registry(n_bits=8)
        with pytest.raises(BadLength):
            reg.register_concept("<a>", "texture")

    def test_get_unknown_concept(self):
        reg = Registry(n_bits=8)
        with pytest.raises(UnknownConcept):
            reg.get("missing")


class TestQueries:
    def test_default_query_templates_by_kind(self):
        reg = Registry(n_bits=8)
        reg.register_concept("<o>", "object")
        reg.register_concept("<s>", "style")
        reg.register_concept("<g>", "general")
        assert reg.render_query("o") == "a photo of <o>"
        assert reg.render_query("s") == "art by <s>"
        assert reg.render_query("g") == "a photo of <g>"

    def test_custom_query_template(self):
        reg = Registry(n_bits=8)
        reg.register_concept("<o>", "object", query_template="an image showing {}")
        assert reg.render_query("o") == "an image showing <o>"

    def test_query_template_must_have_one_placeholder(self):
        with pytest.raises(BadLength):
            ConceptRecord("a", "<a>", "object", Secret((0, 1)), "no placeholder")
        with pytest.raises(BadLength):
            ConceptRecord("a", "<a>", "object", Secret((0, 1)), "{} and {}")

    def test_render_training_prompt_banks_and_bounds(self):
        from conceptmark import templates
        reg = Registry(n_bits=8)
        reg.register_concept("<o>", "object")
        assert reg.render_training_prompt("o", index=0) == \
            templates.OBJECT_TEMPLATES[0].format("<o>")
        assert reg.render_training_prompt("o", template_bank="style", index=2) == \
            templates.STYLE_TEMPLATES[2].format("<o>")
        assert reg.render_training_prompt("o", template_bank=["only {}"], index=0) == \
            "only <o>"
        from conceptmark.errors import IndexOutOfRange
        with pytest.raises(IndexOutOfRange):
            reg.render_training_prompt("o", index=10_000)
        with pytest.raises(IndexOutOfRange):
            reg.render_training_prompt("o", template_bank="nope", index=0)


class TestSerialization:
    def _populated(self):
        reg = Registry(n_bits=8, seed=11)
        reg.register_concept("<obj-circle>", "object")
        reg.register_concept("<sty-azure>", "style", query_template="made by {}")
        reg.register_concept("plainword", "general")
        return reg

    def test_round_trip_preserves_everything(self, tmp_path):
        reg = self._populated()
        path = tmp_path / "registry.json"
        save_registry(reg, path)
        loaded = load_registry(path)
        assert loaded.n_bits == reg.n_bits
        assert loaded.concept_ids() == reg.concept_ids()
        for cid in reg.concept_ids():
            a, b = reg.get(cid), loaded.get(cid)
            assert (a.token, a.kind, a.secret.bits, a.query_template) == \
                (b.token, b.kind, b.secret.bits, b.query_template)

    def test_schema_shape(self, tmp_path):
        reg = self._populated()
        path = tmp_path / "registry.json"
        save_registry(reg, path)
        raw = json.loads(path.read_text())
        assert raw["schema_version"] == 1
        assert raw["n_bits"] == 8
        assert isinstance(raw["records"], list)
        entry = raw["records"][0]
        assert set(entry) == {"concept_id", "token", "kind", "secret", "query_template"}
        assert all(b in (0, 1) for b in entry["secret"])

    def test_schema_version_mismatch(self, tmp_path):
        reg = self._populated()
        path = tmp_path / "registry.json"
        save_registry(reg, path)
        raw = json.loads(path.read_text())
        raw["schema_version"] = 99
        path.write_text(json.dumps(raw))
        with pytest.raises(SchemaVersionMismatch):
            load_registry(path)

    @pytest.mark.parametrize("mutate", [
        lambda raw: raw["records"][0].pop("token"),
        lambda raw: raw["records"][0]["secret"].append(1),
        lambda raw: raw["records"].append(dict(raw["records"][0])),
        lambda raw: raw["records"][1].__setitem__("secret", raw["records"][0]["secret"]),
        lambda raw: raw["records"][1].__setitem__("token", raw["records"][0]["token"]),
    ])
    def test_corrupted_files_rejected(self, tmp_path, mutate):
        reg = self._populated()
        path = tmp_path / "registry.json"
        save_registry(reg, path)
        raw = json.loads(path.read_text())
        mutate(raw)
        path.write_text(json.dumps(raw))
        with pytest.raises(IntegrityError):
            load_registry(path)

    def test_not_json(self, tmp_path):
        path = tmp_path / "registry.json"
        path.write_text("{nope")
        with pytest.raises(ParseError):
            load_registry(path)

    def test_registry_to_dict_is_json_stable(self):
        reg = self._populated()
        d1 = json.dumps(registry_to_dict(reg), sort_keys=True)
        d2 = json.dumps(registry_to_dict(reg), sort_keys=True)
        assert d1 == d2


class TestMultiConceptDataset:
    def test_round_trip(self, tmp_path):
        samples = [
            MultiConceptSample("a cat wearing a sweater sitting on a sunny beach",
                               ["cat", "sweater", "sunny", "beach"]),
            MultiConceptSample("a fox sitting beside a glowing campfire at night",
                               ["fox", "glowing", "campfire", "night"]),
        ]
        path = tmp_path / "multi.json"
        save_multiconcept_dataset(samples, path)
        raw = json.loads(path.read_text())
        assert isinstance(raw, list)
        assert set(raw[0]) == {"prompt", "targets"}
        loaded = load_multiconcept_dataset(path)
        assert [(s.prompt, s.targets) for s in loaded] == \
            [(s.prompt, s.targets) for s in samples]

    def test_needs_two_targets(self):
        with pytest.raises(ParseError):
            MultiConceptSample("a cat", ["cat"])

    def test_target_missing_from_prompt(self, tmp_path):
        path = tmp_path / "multi.json"
        path.write_text(json.dumps([
            {"prompt": "a cat on a mat", "targets": ["cat", "dog"]},
        ]))
        with pytest.raises(TargetNotInPrompt):
            load_multiconcept_dataset(path)

    def test_punctuation_stripped_when_matching(self, tmp_path):
        path = tmp_path / "multi.json"
        path.write_text(json.dumps([
            {"prompt": "a photo of a cat, next to a dog.", "targets": ["cat", "dog"]},
        ]))
        loaded = load_multiconcept_dataset(path)
        assert loaded[0].targets == ["cat", "dog"]

    def test_registered_tokens_accepted_for_concept_ids(self, tmp_path):
        reg = Registry(n_bits=8)
        reg.register_concept("<obj-cat>", "object")
        path = tmp_path / "multi.json"
        path.write_text(json.dumps([
            {"prompt": "a photo of a <obj-cat> and a dog", "targets": ["obj-cat", "dog"]},
        ]))
        loaded = load_multiconcept_dataset(path, registry=reg)
        assert loaded[0].targets == ["obj-cat", "dog"]
        with pytest.raises(TargetNotInPrompt):
            load_multiconcept_dataset(path)  # without the registry mapping

    def test_malformed_samples(self, tmp_path):
        path = tmp_path / "multi.json"
        path.write_text(json.dumps({"not": "a list"}))
        with pytest.raises(ParseError):
            load_multiconcept_dataset(path)
        path.write_text(json.dumps([{"prompt": "x"}]))
        with pytest.raises(ParseError):
            load_multiconcept_dataset(path)
