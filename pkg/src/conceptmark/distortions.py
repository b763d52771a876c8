"""Evaluation-time image distortions applied before retrieval.

All transforms preserve shape, clamp to [0, 1], and are deterministic
given the DistortionSpec seed. Identity parameter settings short-circuit
to an exact copy of the input so ordering tests have a clean reference row.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from PIL import Image

from .errors import InvalidParameter
from .generation import ImageTensor
from .objectives import loss_ce

KINDS = ("jpeg", "rotation", "crop_and_resize", "gaussian_blur", "gaussian_noise",
         "color_jitter", "sharpness", "adversarial")


@dataclass
class DistortionSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameter(f"unknown distortion kind {self.kind!r}")
        validators = {
            "jpeg": [("quality", 1, 95)],
            "rotation": [("degrees", -180.0, 180.0)],
            "crop_and_resize": [("keep_ratio", 0.1, 1.0)],
            "gaussian_blur": [("sigma", 0.0, 16.0)],
            "gaussian_noise": [("sigma", 0.0, 1.0)],
            "color_jitter": [("strength", 0.0, 1.0)],
            "sharpness": [("factor", 0.0, 8.0)],
            "adversarial": [("epsilon", 0.0, 1.0), ("steps", 1, 1000)],
        }
        for name, lo, hi in validators[self.kind]:
            if name not in self.params:
                raise InvalidParameter(f"{self.kind} requires parameter {name!r}")
            value = self.params[name]
            if not lo <= value <= hi:
                raise InvalidParameter(
                    f"{self.kind}.{name}={value} outside [{lo}, {hi}]"
                )

    @property
    def name(self) -> str:
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"


def default_suite() -> list:
    """One spec per distortion family at conventional mid-severity settings."""
    return [
        DistortionSpec("jpeg", {"quality": 50}),
        DistortionSpec("rotation", {"degrees": 15.0}),
        DistortionSpec("crop_and_resize", {"keep_ratio": 0.8}),
        DistortionSpec("gaussian_blur", {"sigma": 1.0}),
        DistortionSpec("gaussian_noise", {"sigma": 0.05}),
        DistortionSpec("color_jitter", {"strength": 0.2}),
        DistortionSpec("sharpness", {"factor": 2.0}),
        DistortionSpec("adversarial", {"epsilon": 2.0 / 255.0, "steps": 10}),
    ]


def _gaussian_kernel(sigma: float, size: int = 5, dtype=torch.float32) -> torch.Tensor:
    half = size // 2
    coords = torch.arange(size, dtype=dtype) - half
    sigma = max(sigma, 1e-8)
    g = torch.exp(-(coords ** 2) / (2 * sigma * sigma))
    g = g / g.sum()
    return g.outer(g)


def _blur(x: torch.Tensor, sigma: float, size: int = 5) -> torch.Tensor:
    kernel = _gaussian_kernel(sigma, size, dtype=x.dtype)
    weight = kernel.expand(x.shape[0], 1, size, size)
    pad = size // 2
    padded = F.pad(x.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(padded, weight, groups=x.shape[0])[0]


def _rotate(x: torch.Tensor, degrees: float) -> torch.Tensor:
    rad = math.radians(degrees)
    cos, sin = math.cos(rad), math.sin(rad)
    theta = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=x.dtype)
    grid = F.affine_grid(theta.unsqueeze(0), (1, *x.shape), align_corners=False)
    return F.grid_sample(x.unsqueeze(0), grid, mode="bilinear",
                         padding_mode="reflection", align_corners=False)[0]


def _jpeg(x: torch.Tensor, quality: int) -> torch.Tensor:
    arr = torch.round(x.clamp(0, 1) * 255.0).to(torch.uint8)
    pil = Image.fromarray(arr.permute(1, 2, 0).contiguous().numpy(), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as decoded:
        out = torch.frombuffer(
            bytearray(decoded.convert("RGB").tobytes()), dtype=torch.uint8
        ).reshape(x.shape[1], x.shape[2], 3)
    return out.permute(2, 0, 1).to(x.dtype) / 255.0


def _color_jitter(x: torch.Tensor, strength: float, gen: torch.Generator) -> torch.Tensor:
    factors = 1.0 + strength * (2.0 * torch.rand(3, generator=gen) - 1.0)
    fb, fc, fs = (float(f) for f in factors)
    out = x
    if fb != 1.0:
        out = out * fb
    if fc != 1.0:
        mean = out.mean()
        out = (out - mean) * fc + mean
    if fs != 1.0:
        gray = out.mean(dim=0, keepdim=True)
        out = gray + (out - gray) * fs
    return out


def apply(spec: DistortionSpec, image: ImageTensor, model=None, registry=None,
          concept_id: str = None) -> ImageTensor:
    """Apply one distortion; adversarial additionally needs the model under
    attack, the registry, and the queried concept."""
    x = image.values
    kind = spec.kind
    if kind == "jpeg":
        out = _jpeg(x, spec.params["quality"])
    elif kind == "rotation":
        degrees = spec.params["degrees"]
        out = x.clone() if degrees == 0.0 else _rotate(x, degrees)
    elif kind == "crop_and_resize":
        keep = spec.params["keep_ratio"]
        if keep == 1.0:
            out = x.clone()
        else:
            h, w = x.shape[1], x.shape[2]
            ch, cw = max(1, int(round(h * keep))), max(1, int(round(w * keep)))
            top, left = (h - ch) // 2, (w - cw) // 2
            crop = x[:, top:top + ch, left:left + cw]
            out = F.interpolate(crop.unsqueeze(0), size=(h, w), mode="bilinear",
                                align_corners=False)[0]
    elif kind == "gaussian_blur":
        out = _blur(x, spec.params["sigma"])
    elif kind == "gaussian_noise":
        sigma = spec.params["sigma"]
        if sigma == 0.0:
            out = x.clone()
        else:
            gen = torch.Generator().manual_seed(spec.seed)
            out = x + sigma * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    elif kind == "color_jitter":
        gen = torch.Generator().manual_seed(spec.seed)
        out = _color_jitter(x, spec.params["strength"], gen)
    elif kind == "sharpness":
        factor = spec.params["factor"]
        if factor == 1.0:
            out = x.clone()
        else:
            out = x + (factor - 1.0) * (x - _blur(x, 1.0))
    elif kind == "adversarial":
        if model is None or registry is None or concept_id is None:
            raise InvalidParameter(
                "adversarial distortion needs model, registry, and concept_id"
            )
        attacked = adversarial_attack(model, registry, image, concept_id,
                                      epsilon=spec.params["epsilon"],
                                      steps=int(spec.params["steps"]))
        return attacked
    else:
        raise InvalidParameter(f"unknown distortion kind {kind!r}")
    provenance = dict(image.provenance)
    provenance["distortion"] = spec.name
    return ImageTensor(values=out.clamp(0.0, 1.0), provenance=provenance)


def adversarial_attack(model, registry, image: ImageTensor, concept_id: str,
                       epsilon: float, steps: int = 10) -> ImageTensor:
    """Gradient-sign attack maximizing the decoding loss of the true secret
    within an infinity-norm budget."""
    if epsilon < 0:
        raise InvalidParameter(f"epsilon must be non-negative, got {epsilon}")
    if steps < 1:
        raise InvalidParameter(f"steps must be >= 1, got {steps}")
    if epsilon == 0.0:
        return ImageTensor(values=image.values.clone(),
                           provenance=dict(image.provenance))
    record = registry.get(concept_id)
    query = registry.render_query(concept_id)
    with torch.no_grad():
        txt = model.backbone.text_features(query, model.table).unsqueeze(0)
    x0 = image.values.detach()
    delta = torch.zeros_like(x0)
    alpha = 2.5 * epsilon / steps
    for _ in range(steps):
        adv = (x0 + delta).clamp(0.0, 1.0).requires_grad_(True)
        feats = model.backbone.image_features_batch(adv.unsqueeze(0))
        embedding = model.retriever(feats, txt)
        logits = model.decoder(embedding)[0]
        loss = loss_ce(record.secret, logits)
        grad = torch.autograd.grad(loss, adv)[0]
        with torch.no_grad():
            delta = (delta + alpha * grad.sign()).clamp(-epsilon, epsilon)
    out = (x0 + delta).clamp(0.0, 1.0)
    provenance = dict(image.provenance)
    provenance["distortion"] = f"adversarial(epsilon={epsilon},steps={steps})"
    return ImageTensor(values=out.detach(), provenance=provenance)
