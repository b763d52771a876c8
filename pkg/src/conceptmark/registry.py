"""Concept registry: secrets, tokens, query templates, and dataset loading.

The registry is the single source of truth for everything keyed by
concept id. It is populated in a single-writer phase and treated as
immutable afterwards; inference paths only read from it.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

from . import templates
from .errors import (
    BadLength,
    DuplicateToken,
    IndexOutOfRange,
    IntegrityError,
    IoError,
    ParseError,
    SchemaVersionMismatch,
    SecretCollision,
    TargetNotInPrompt,
    UnknownConcept,
)

SCHEMA_VERSION = 1
KINDS = ("object", "style", "general")

DEFAULT_QUERY_TEMPLATES = {
    "object": "a photo of {}",
    "style": "art by {}",
    "general": "a photo of {}",
}

# Redraw budget before giving up on finding a non-colliding secret.
_MAX_REDRAWS = 1000


@dataclass(frozen=True)
class Secret:
    """Fixed-length binary identifier for one concept."""

    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if len(self.bits) == 0:
            raise BadLength("secret must have at least one bit")
        for b in self.bits:
            if b not in (0, 1):
                raise BadLength(f"secret bits must be 0 or 1, got {b}")

    def __len__(self):
        return len(self.bits)

    def hamming(self, other: "Secret") -> int:
        if len(self.bits) != len(other.bits):
            raise BadLength("hamming distance needs equal lengths")
        return sum(a != b for a, b in zip(self.bits, other.bits))

    def complement(self) -> "Secret":
        return Secret(tuple(1 - b for b in self.bits))

    @staticmethod
    def random(n_bits: int, rng: random.Random) -> "Secret":
        if n_bits < 1:
            raise BadLength(f"n_bits must be positive, got {n_bits}")
        return Secret(tuple(rng.randrange(2) for _ in range(n_bits)))


@dataclass
class ConceptRecord:
    concept_id: str
    token: str
    kind: str
    secret: Secret
    query_template: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadLength(f"unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.query_template.count("{}") != 1:
            raise BadLength(
                f"query template must contain exactly one {{}} placeholder: "
                f"{self.query_template!r}"
            )


@dataclass
class MultiConceptSample:
    prompt: str
    targets: list

    def __post_init__(self):
        if len(self.targets) < 2:
            raise ParseError(
                f"multi-concept sample needs at least 2 targets, got {len(self.targets)}"
            )


def _prompt_words(prompt: str):
    words = set()
    for raw in prompt.split():
        words.add(raw)
        words.add(raw.strip(".,!?;:()\"'"))
    return words


class Registry:
    """Owns concept records and draws fresh secrets from a seeded stream.

    min_hamming > 1 additionally spaces auto-drawn secrets apart so that
    near-collisions cannot blur exact-match attribution; explicit secrets
    are only checked for outright duplication.
    """

    def __init__(self, n_bits: int = 16, seed: int = 0, min_hamming: int = 1):
        if n_bits < 1:
            raise BadLength(f"n_bits must be positive, got {n_bits}")
        if min_hamming < 1:
            raise BadLength(f"min_hamming must be >= 1, got {min_hamming}")
        self.n_bits = n_bits
        self.seed = seed
        self.min_hamming = min_hamming
        self.schema_version = SCHEMA_VERSION
        self.records: dict = {}
        self._rng = random.Random(seed)

    def __len__(self):
        return len(self.records)

    def __contains__(self, concept_id):
        return concept_id in self.records

    def concept_ids(self):
        return list(self.records.keys())

    def get(self, concept_id: str) -> ConceptRecord:
        try:
            return self.records[concept_id]
        except KeyError:
            raise UnknownConcept(f"no concept registered with id {concept_id!r}")

    def register_concept(
        self,
        token: str,
        kind: str,
        secret: Secret = None,
        concept_id: str = None,
        query_template: str = None,
    ) -> ConceptRecord:
        if kind not in KINDS:
            raise BadLength(f"unknown kind {kind!r}, expected one of {KINDS}")
        if concept_id is None:
            concept_id = token.strip("<>")
        for rec in self.records.values():
            if rec.token == token:
                raise DuplicateToken(f"token {token!r} already registered")
        if concept_id in self.records:
            raise DuplicateToken(f"concept id {concept_id!r} already registered")

        existing = [rec.secret for rec in self.records.values()]
        if secret is None:
            secret = self._draw_secret(existing)
        else:
            if len(secret) != self.n_bits:
                raise BadLength(
                    f"secret has {len(secret)} bits, registry uses {self.n_bits}"
                )
            if any(secret.bits == s.bits for s in existing):
                raise SecretCollision(f"secret for {token!r} collides with an existing concept")

        if query_template is None:
            query_template = DEFAULT_QUERY_TEMPLATES[kind]
        record = ConceptRecord(
            concept_id=concept_id,
            token=token,
            kind=kind,
            secret=secret,
            query_template=query_template,
        )
        self.records[concept_id] = record
        return record

    def _draw_secret(self, existing) -> Secret:
        for _ in range(_MAX_REDRAWS):
            candidate = Secret.random(self.n_bits, self._rng)
            if all(candidate.hamming(s) >= self.min_hamming for s in existing):
                return candidate
        raise SecretCollision(
            f"could not draw a secret with min hamming {self.min_hamming} "
            f"after {_MAX_REDRAWS} attempts ({len(existing)} registered)"
        )

    def render_query(self, concept_id: str) -> str:
        rec = self.get(concept_id)
        return rec.query_template.format(rec.token)

    def render_training_prompt(self, concept_id: str, template_bank=None, index: int = 0) -> str:
        rec = self.get(concept_id)
        if template_bank is None:
            bank = templates.BANKS[rec.kind]
        elif isinstance(template_bank, str):
            if template_bank not in templates.BANKS:
                raise IndexOutOfRange(f"unknown template bank {template_bank!r}")
            bank = templates.BANKS[template_bank]
        else:
            bank = template_bank
        if not 0 <= index < len(bank):
            raise IndexOutOfRange(
                f"template index {index} out of range for bank of size {len(bank)}"
            )
        return bank[index].format(rec.token)


def registry_to_dict(registry: Registry) -> dict:
    return {
        "schema_version": registry.schema_version,
        "n_bits": registry.n_bits,
        "records": [
            {
                "concept_id": rec.concept_id,
                "token": rec.token,
                "kind": rec.kind,
                "secret": list(rec.secret.bits),
                "query_template": rec.query_template,
            }
            for rec in registry.records.values()
        ],
    }


def save_registry(registry: Registry, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(registry_to_dict(registry), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write registry to {path}: {exc}")


def load_registry(path) -> Registry:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read registry from {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"registry file {path} is not valid JSON: {exc}")

    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"registry schema version {version}, expected {SCHEMA_VERSION}"
        )
    n_bits = raw.get("n_bits")
    if not isinstance(n_bits, int) or n_bits < 1:
        raise IntegrityError(f"bad n_bits in registry file: {n_bits!r}")

    registry = Registry(n_bits=n_bits)
    seen_secrets = set()
    for entry in raw.get("records", []):
        try:
            secret = Secret(tuple(entry["secret"]))
            record = ConceptRecord(
                concept_id=entry["concept_id"],
                token=entry["token"],
                kind=entry["kind"],
                secret=secret,
                query_template=entry["query_template"],
            )
        except (KeyError, TypeError) as exc:
            raise IntegrityError(f"malformed registry record: {exc}")
        except BadLength as exc:
            raise IntegrityError(str(exc))
        if len(secret) != n_bits:
            raise IntegrityError(
                f"record {record.concept_id!r} has {len(secret)} bits, registry uses {n_bits}"
            )
        if record.concept_id in registry.records:
            raise IntegrityError(f"duplicate concept id {record.concept_id!r} in file")
        if secret.bits in seen_secrets:
            raise IntegrityError(f"duplicate secret for concept {record.concept_id!r}")
        if any(rec.token == record.token for rec in registry.records.values()):
            raise IntegrityError(f"duplicate token {record.token!r} in file")
        seen_secrets.add(secret.bits)
        registry.records[record.concept_id] = record
    return registry


def load_multiconcept_dataset(path, registry: Registry = None) -> list:
    """Parse a JSON array of {"prompt": ..., "targets": [...]} samples.

    Each target must appear verbatim in the prompt, either as the raw
    target string or, when a registry is given, as the registered token
    of that concept id.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read dataset from {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"dataset file {path} is not valid JSON: {exc}")

    if not isinstance(raw, list):
        raise ParseError("dataset must be a JSON array of samples")

    samples = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict) or "prompt" not in entry or "targets" not in entry:
            raise ParseError(f"sample {i} must be an object with prompt and targets")
        prompt = entry["prompt"]
        targets = entry["targets"]
        if not isinstance(prompt, str) or not isinstance(targets, list):
            raise ParseError(f"sample {i} has malformed prompt or targets")
        words = _prompt_words(prompt)
        for target in targets:
            candidates = {target}
            if registry is not None and target in registry:
                candidates.add(registry.get(target).token)
            if not candidates & words:
                raise TargetNotInPrompt(
                    f"target {target!r} does not appear in prompt {prompt!r}"
                )
        samples.append(MultiConceptSample(prompt=prompt, targets=list(targets)))
    return samples


def save_multiconcept_dataset(samples, path) -> None:
    payload = [{"prompt": s.prompt, "targets": list(s.targets)} for s in samples]
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write dataset to {path}: {exc}")
