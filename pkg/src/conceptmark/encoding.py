"""Watermark insertion networks and the embedding/noise containers.

The concept encoder adds a secret-dependent delta to one token embedding;
the secret mapper adds a secret-dependent pattern to the initial noise.
Both have zero-initialized output layers, so a freshly built model is
exactly watermark-free until the first optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NonPositiveAlpha,
    ShapeMismatch,
    UnknownTargetPosition,
)
from .registry import Secret


@dataclass
class PromptEmbedding:
    """Ordered token embeddings plus concept id -> token index."""

    tokens: torch.Tensor  # (L, d)
    target_positions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens.dim() != 2:
            raise ShapeMismatch(f"tokens must be (L, d), got {tuple(self.tokens.shape)}")
        length = self.tokens.shape[0]
        seen = set()
        for cid, pos in self.target_positions.items():
            if not 0 <= pos < length:
                raise IndexOutOfRange(
                    f"target position {pos} for {cid!r} outside prompt of length {length}"
                )
            if pos in seen:
                raise IndexOutOfRange(f"two concepts share target position {pos}")
            seen.add(pos)

    @property
    def dim(self):
        return self.tokens.shape[1]


@dataclass
class NoiseTensor:
    values: torch.Tensor  # (C, H, W)
    seed: int = 0

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ShapeMismatch(f"noise must be (C, H, W), got {tuple(self.values.shape)}")


def secret_to_pm(secret, dtype=torch.float32, device=None) -> torch.Tensor:
    """Map bits to {-1, +1} so the all-zero secret is not a degenerate input."""
    bits = secret.bits if isinstance(secret, Secret) else tuple(secret)
    return torch.tensor([2.0 * b - 1.0 for b in bits], dtype=dtype, device=device)


def _zero_init(layer: nn.Linear):
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)


class ConceptEncoder(nn.Module):
    """f(e_c, S) -> delta in embedding space, zero at initialization."""

    def __init__(self, embedding_dim: int, n_bits: int, hidden_mult: int = 4,
                 dtype=torch.float32):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.n_bits = n_bits
        hidden = hidden_mult * embedding_dim
        self.net = nn.Sequential(
            nn.Linear(embedding_dim + n_bits, hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(hidden, embedding_dim, dtype=dtype),
        )
        _zero_init(self.net[-1])

    def forward(self, e_c: torch.Tensor, secret_pm: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([e_c, secret_pm], dim=-1))


class SecretMapper(nn.Module):
    """f(S) -> additive pattern with the latent shape, zero at initialization."""

    def __init__(self, n_bits: int, latent_shape, hidden: int = 128, gain: float = 1.0,
                 dtype=torch.float32):
        super().__init__()
        self.n_bits = n_bits
        self.latent_shape = tuple(latent_shape)
        self.gain = gain
        out_dim = 1
        for s in self.latent_shape:
            out_dim *= s
        self.net = nn.Sequential(
            nn.Linear(n_bits, hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=dtype),
            nn.ReLU(),
            nn.Linear(hidden, out_dim, dtype=dtype),
        )
        _zero_init(self.net[-1])

    def forward(self, secret_pm: torch.Tensor) -> torch.Tensor:
        flat = self.net(secret_pm)
        return self.gain * flat.reshape(*secret_pm.shape[:-1], *self.latent_shape)


def concept_encoder_forward(encoder: ConceptEncoder, e_c: torch.Tensor, secret) -> torch.Tensor:
    if e_c.shape[-1] != encoder.embedding_dim:
        raise DimensionMismatch(
            f"embedding dim {e_c.shape[-1]} does not match encoder dim {encoder.embedding_dim}"
        )
    secret_pm = secret_to_pm(secret, dtype=e_c.dtype, device=e_c.device)
    if secret_pm.shape[-1] != encoder.n_bits:
        raise DimensionMismatch(
            f"secret has {secret_pm.shape[-1]} bits, encoder expects {encoder.n_bits}"
        )
    return encoder(e_c, secret_pm)


def secret_mapper_forward(mapper: SecretMapper, secret) -> torch.Tensor:
    secret_pm = secret_to_pm(secret, dtype=next(mapper.parameters()).dtype)
    if secret_pm.shape[-1] != mapper.n_bits:
        raise DimensionMismatch(
            f"secret has {secret_pm.shape[-1]} bits, mapper expects {mapper.n_bits}"
        )
    return mapper(secret_pm)


def perturb_prompt(embedding: PromptEmbedding, assignments: dict) -> PromptEmbedding:
    """Add per-concept deltas at target positions; everything else is untouched.

    assignments maps concept_id -> (ConceptEncoder, Secret). The input is
    never mutated.
    """
    out = embedding.tokens.clone()
    for concept_id, (encoder, secret) in assignments.items():
        if concept_id not in embedding.target_positions:
            raise UnknownTargetPosition(
                f"concept {concept_id!r} has no target position in this prompt"
            )
        pos = embedding.target_positions[concept_id]
        delta = concept_encoder_forward(encoder, embedding.tokens[pos], secret)
        out[pos] = embedding.tokens[pos] + delta
    return PromptEmbedding(tokens=out, target_positions=dict(embedding.target_positions))


def perturb_noise(noise: NoiseTensor, deltas) -> NoiseTensor:
    """Sum all per-secret patterns onto the noise; input is not mutated."""
    values = noise.values.clone()
    for delta in deltas:
        if delta.shape != noise.values.shape:
            raise ShapeMismatch(
                f"delta shape {tuple(delta.shape)} vs noise shape {tuple(noise.values.shape)}"
            )
        values = values + delta
    return NoiseTensor(values=values, seed=noise.seed)


def apply_prompt_weight(embedding: PromptEmbedding, position: int, alpha: float) -> PromptEmbedding:
    """Scale one token embedding by alpha at generation time."""
    if alpha <= 0:
        raise NonPositiveAlpha(f"alpha must be positive, got {alpha}")
    length = embedding.tokens.shape[0]
    if not 0 <= position < length:
        raise IndexOutOfRange(f"position {position} outside prompt of length {length}")
    out = embedding.tokens.clone()
    out[position] = embedding.tokens[position] * alpha
    return PromptEmbedding(tokens=out, target_positions=dict(embedding.target_positions))
