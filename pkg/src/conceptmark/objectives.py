"""Composite training objective: decoding CE, style consistency, image L2,
embedding regularization, and an optional latent L2 kept behind a zero
default weight for ablations.

All reductions are per-element means so the default weights stay
meaningful across image sizes and bit lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import (
    DimensionMismatch,
    InvalidParameter,
    LengthMismatch,
    ShapeMismatch,
    ZeroVector,
)


@dataclass
class LossWeights:
    lambda1: float = 5.0  # decoding cross-entropy
    lambda2: float = 5.0  # style feature consistency
    lambda3: float = 1.0  # image-space L2
    lambda4: float = 1.0  # embedding regularization
    lambda_latent: float = 0.0  # optional latent-noise L2 (ablation only)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda_latent"):
            if getattr(self, name) < 0:
                raise InvalidParameter(f"{name} must be non-negative")


@dataclass
class LossBreakdown:
    ce: torch.Tensor
    csd: torch.Tensor
    l2_image: torch.Tensor
    reg: torch.Tensor
    l2_latent: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict:
        out = {}
        for name in ("ce", "csd", "l2_image", "reg", "l2_latent", "total"):
            value = getattr(self, name)
            out[name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        return out


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float32)


def loss_ce(secret, logits) -> torch.Tensor:
    """Mean binary cross-entropy between secret bits and decoder logits.

    Evaluated in logit space (softplus form) so large logits stay finite.
    """
    logits = _as_tensor(logits)
    if hasattr(secret, "bits"):
        target = torch.tensor(secret.bits, dtype=logits.dtype, device=logits.device)
    else:
        target = _as_tensor(secret).to(logits.dtype)
    if target.shape != logits.shape:
        raise LengthMismatch(
            f"secret shape {tuple(target.shape)} vs logits shape {tuple(logits.shape)}"
        )
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def loss_csd(feat_clean, feat_wm) -> torch.Tensor:
    """One minus cosine similarity of style features.

    Bitwise-identical inputs return exactly zero; the general path uses
    normalized vectors, so the value lies in [0, 2].
    """
    a = _as_tensor(feat_clean)
    b = _as_tensor(feat_wm)
    if a.shape != b.shape:
        raise DimensionMismatch(
            f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    if a.dim() == 1:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    norm_a = a.norm(dim=-1)
    norm_b = b.norm(dim=-1)
    if (norm_a == 0).any() or (norm_b == 0).any():
        raise ZeroVector("cosine loss is undefined for zero vectors")
    # cosine is extremal at identical and antiparallel inputs, so the exact
    # constants carry the correct (zero) gradient; the graph stays alive
    if torch.equal(a, b):
        return (b.sum() * 0.0).reshape(())
    if torch.equal(a, -b):
        return (b.sum() * 0.0 + 2.0).reshape(())
    an = a / norm_a.unsqueeze(-1)
    bn = b / norm_b.unsqueeze(-1)
    cos = (an * bn).sum(dim=-1)
    return (1.0 - cos).clamp(0.0, 2.0).mean()


def loss_l2_image(img_clean, img_wm) -> torch.Tensor:
    a = _as_tensor(img_clean)
    b = _as_tensor(img_wm)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def loss_reg(e_c, e_pred) -> torch.Tensor:
    a = _as_tensor(e_c)
    b = _as_tensor(e_pred)
    if a.shape != b.shape:
        raise DimensionMismatch(
            f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    return ((a - b) ** 2).mean()


def loss_l2_latent(z, z_hat) -> torch.Tensor:
    a = _as_tensor(z)
    b = _as_tensor(z_hat)
    if a.shape != b.shape:
        raise ShapeMismatch(f"latent shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def loss_total(ce, csd, l2_image, reg, weights: LossWeights, l2_latent=0.0) -> LossBreakdown:
    ce = _as_tensor(ce)
    csd = _as_tensor(csd)
    l2_image = _as_tensor(l2_image)
    reg = _as_tensor(reg)
    l2_latent = _as_tensor(l2_latent)
    total = (
        weights.lambda1 * ce
        + weights.lambda2 * csd
        + weights.lambda3 * l2_image
        + weights.lambda4 * reg
        + weights.lambda_latent * l2_latent
    )
    return LossBreakdown(
        ce=ce, csd=csd, l2_image=l2_image, reg=reg, l2_latent=l2_latent, total=total
    )
