"""Toy conditional generator, token embedding table, and synthetic data.

The generator is a small x0-prediction denoiser unrolled for a fixed
handful of deterministic sampling steps, conditioned on the summed prompt
embedding through feature-wise modulation. It exists to carry watermark
signal end to end while staying differentiable w.r.t. both the initial
noise and the prompt embeddings.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from . import templates
from .encoding import NoiseTensor, PromptEmbedding
from .errors import (
    ConfigError,
    DivergenceDetected,
    EmptyPrompt,
    IoError,
    ShapeMismatch,
)

SHAPE_WORDS = (
    "circle", "square", "triangle", "diamond", "plus", "ring", "star", "hbar",
    "vbar", "frame", "xmark", "dots", "moon", "ell", "tee", "wedge",
)

STYLE_WORDS = (
    "crimson", "azure", "emerald", "amber", "violet", "coral", "slate", "olive",
    "rose", "teal", "indigo", "ochre", "mint", "plum", "rust", "navy",
)

_TEXTURES = ("solid", "hstripe", "vstripe", "checker", "diag", "dotgrid", "gradh", "rings")

OOV_TOKEN = "<oov>"

# Palette values stay inside [0.15, 0.85] so the tanh output head never
# needs to saturate to reproduce them.
def _palette(i: int):
    hue = (i * 0.61803398875) % 1.0
    fg = colorsys.hsv_to_rgb(hue, 0.65, 0.75)
    bg = colorsys.hsv_to_rgb((hue + 0.45) % 1.0, 0.25, 0.80)
    squeeze = lambda c: tuple(0.15 + 0.7 * v for v in c)
    return squeeze(fg), squeeze(bg)

_NEUTRAL_FG = (0.32, 0.32, 0.32)
_NEUTRAL_BG = (0.72, 0.72, 0.72)


def shape_mask(shape_idx: int, size: int, dx: float = 0.0, dy: float = 0.0,
               scale: float = 1.0) -> torch.Tensor:
    """Boolean (size, size) mask for one of the 16 procedural shapes."""
    half = (size - 1) / 2.0
    py, px = torch.meshgrid(
        torch.arange(size, dtype=torch.float32),
        torch.arange(size, dtype=torch.float32),
        indexing="ij",
    )
    x = (px - half - dx) / (half * scale)
    y = (py - half - dy) / (half * scale)
    r = torch.sqrt(x * x + y * y)
    theta = torch.atan2(y, x)
    name = SHAPE_WORDS[shape_idx]
    if name == "circle":
        return r <= 0.62
    if name == "square":
        return torch.maximum(x.abs(), y.abs()) <= 0.55
    if name == "triangle":
        return (y >= -0.6) & (y <= 0.62) & (x.abs() <= (0.62 - y) * 0.55)
    if name == "diamond":
        return (x.abs() + y.abs()) <= 0.72
    if name == "plus":
        inside = torch.maximum(x.abs(), y.abs()) <= 0.66
        return inside & ((x.abs() <= 0.2) | (y.abs() <= 0.2))
    if name == "ring":
        return (r >= 0.32) & (r <= 0.62)
    if name == "star":
        return r <= 0.28 + 0.38 * torch.cos(2 * theta).abs()
    if name == "hbar":
        return y.abs() <= 0.24
    if name == "vbar":
        return x.abs() <= 0.24
    if name == "frame":
        m = torch.maximum(x.abs(), y.abs())
        return (m >= 0.38) & (m <= 0.66)
    if name == "xmark":
        inside = torch.maximum(x.abs(), y.abs()) <= 0.7
        return inside & (((x - y).abs() <= 0.2) | ((x + y).abs() <= 0.2))
    if name == "dots":
        gx = ((px - dx) % 10.0) - 5.0
        gy = ((py - dy) % 10.0) - 5.0
        return (gx * gx + gy * gy) <= (2.2 * scale) ** 2
    if name == "moon":
        return (r <= 0.62) & (((x - 0.28) ** 2 + y * y) >= 0.45 ** 2)
    if name == "ell":
        vert = (x >= -0.62) & (x <= -0.22) & (y.abs() <= 0.62)
        horz = (y >= 0.22) & (y <= 0.62) & (x.abs() <= 0.62)
        return vert | horz
    if name == "tee":
        top = (y >= -0.62) & (y <= -0.28) & (x.abs() <= 0.62)
        stem = (x.abs() <= 0.18) & (y.abs() <= 0.62)
        return top | stem
    if name == "wedge":
        return (r <= 0.68) & (theta.abs() <= 0.65)
    raise ConfigError(f"no mask defined for shape index {shape_idx}")


def _texture_field(texture: str, size: int, phase_x: int = 0, phase_y: int = 0) -> torch.Tensor:
    py, px = torch.meshgrid(
        torch.arange(size, dtype=torch.float32),
        torch.arange(size, dtype=torch.float32),
        indexing="ij",
    )
    px = px + phase_x
    py = py + phase_y
    if texture == "solid":
        return torch.zeros(size, size)
    if texture == "hstripe":
        return (torch.div(py, 4, rounding_mode="floor") % 2).float()
    if texture == "vstripe":
        return (torch.div(px, 4, rounding_mode="floor") % 2).float()
    if texture == "checker":
        return ((torch.div(px, 4, rounding_mode="floor")
                 + torch.div(py, 4, rounding_mode="floor")) % 2).float()
    if texture == "diag":
        return (torch.div(px + py, 4, rounding_mode="floor") % 2).float()
    if texture == "dotgrid":
        gx = (px % 8.0) - 4.0
        gy = (py % 8.0) - 4.0
        return ((gx * gx + gy * gy) <= 4.0).float()
    if texture == "gradh":
        return (px - phase_x) / max(size - 1, 1)
    if texture == "rings":
        half = (size - 1) / 2.0
        r = torch.sqrt((px - phase_x - half) ** 2 + (py - phase_y - half) ** 2)
        return (torch.div(r, 3, rounding_mode="floor") % 2).float()
    raise ConfigError(f"unknown texture {texture!r}")


def render_concept_image(size: int, shape_idx=None, style_idx=None,
                         rng: torch.Generator = None) -> torch.Tensor:
    """Render (3, size, size) in [0,1] from object/style factors.

    Style paints the whole canvas with a two-color texture; the object
    shape inverts the texture inside its mask. rng drives small jitter in
    placement, scale, and texture phase.
    """
    if style_idx is not None:
        texture = _TEXTURES[style_idx % len(_TEXTURES)]
        fg, bg = _palette(style_idx)
    else:
        texture, fg, bg = "solid", _NEUTRAL_FG, _NEUTRAL_BG

    if rng is not None:
        jit = torch.randint(0, 8, (2,), generator=rng).tolist()
        offs = (torch.rand(2, generator=rng) * 4.0 - 2.0).tolist()
        scale = 0.85 + 0.25 * torch.rand((), generator=rng).item()
    else:
        jit, offs, scale = [0, 0], [0.0, 0.0], 1.0

    t_field = _texture_field(texture, size, phase_x=jit[0], phase_y=jit[1])
    fg_t = torch.tensor(fg).view(3, 1, 1)
    bg_t = torch.tensor(bg).view(3, 1, 1)
    canvas = bg_t + (fg_t - bg_t) * t_field.unsqueeze(0)
    if shape_idx is not None:
        mask = shape_mask(shape_idx, size, dx=offs[0], dy=offs[1], scale=scale)
        inverted = fg_t + (bg_t - fg_t) * t_field.unsqueeze(0)
        canvas = torch.where(mask.unsqueeze(0), inverted, canvas)
    return canvas.clamp(0.0, 1.0)


@dataclass
class ImageTensor:
    values: torch.Tensor  # (3, H, W) in [0, 1]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.dim() != 3 or self.values.shape[0] != 3:
            raise ShapeMismatch(f"image must be (3, H, W), got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ShapeMismatch("image contains non-finite values")


class TokenEmbeddingTable:
    """Frozen word -> vector map standing in for a text encoder's embeddings.

    Factor words carry unit-norm vectors; filler words from the template
    banks are shared small-norm vectors so summed prompt embeddings are
    dominated by content tokens. Pseudo-tokens are added at registration
    time, copying the vector of the base word they alias.
    """

    FILLER_SCALE = 0.1

    def __init__(self, dim: int = 32, seed: int = 0, dtype=torch.float32):
        self.dim = dim
        self.dtype = dtype
        self.vectors = {}
        self.pseudo = {}  # token -> concept_id
        gen = torch.Generator().manual_seed(seed)

        def fresh(scale):
            v = torch.randn(dim, generator=gen, dtype=torch.float64)
            v = v / v.norm() * scale
            return v.to(dtype)

        for word in SHAPE_WORDS + STYLE_WORDS:
            self.vectors[word] = fresh(1.0)
        fillers = set()
        for bank in (templates.STYLE_TEMPLATES, templates.OBJECT_TEMPLATES,
                     templates.MULTI_TEMPLATES):
            for tpl in bank:
                for tok in tpl.split():
                    if "{" not in tok:
                        fillers.add(tok)
        for word in sorted(fillers):
            if word not in self.vectors:
                self.vectors[word] = fresh(self.FILLER_SCALE)
        self.vectors[OOV_TOKEN] = fresh(0.05)

    def lookup(self, token: str) -> torch.Tensor:
        return self.vectors.get(token, self.vectors[OOV_TOKEN])

    def add_pseudo_token(self, token: str, concept_id: str, init_from: str):
        if init_from not in self.vectors:
            raise ConfigError(f"base word {init_from!r} not in vocabulary")
        self.vectors[token] = self.vectors[init_from].clone()
        self.pseudo[token] = concept_id

    def clone(self) -> "TokenEmbeddingTable":
        other = TokenEmbeddingTable.__new__(TokenEmbeddingTable)
        other.dim = self.dim
        other.dtype = self.dtype
        other.vectors = {k: v.clone() for k, v in self.vectors.items()}
        other.pseudo = dict(self.pseudo)
        return other

    def state_tensors(self) -> dict:
        return {name: vec for name, vec in sorted(self.vectors.items())}


def embed_prompt(prompt: str, table: TokenEmbeddingTable) -> PromptEmbedding:
    words = prompt.split()
    if not words:
        raise EmptyPrompt("prompt has no tokens")
    rows = torch.stack([table.lookup(w) for w in words])
    positions = {}
    for i, w in enumerate(words):
        cid = table.pseudo.get(w)
        if cid is not None and cid not in positions:
            positions[cid] = i
    return PromptEmbedding(tokens=rows, target_positions=positions)


# --------------------------------------------------------------------------
# synthetic dataset


@dataclass
class SyntheticConceptDatasetConfig:
    image_size: int = 32
    shape_words: tuple = SHAPE_WORDS
    style_words: tuple = STYLE_WORDS
    samples_per_concept: int = 48
    pair_samples: int = 1024
    seed: int = 0


@dataclass
class SyntheticDataset:
    images: torch.Tensor  # (N, 3, H, W)
    prompts: list
    shape_labels: torch.Tensor  # (N,) index into shape_words, -1 if absent
    style_labels: torch.Tensor  # (N,) index into style_words, -1 if absent
    config: SyntheticConceptDatasetConfig

    def __len__(self):
        return self.images.shape[0]


def build_synthetic_dataset(config: SyntheticConceptDatasetConfig) -> SyntheticDataset:
    if not config.shape_words or not config.style_words:
        raise ConfigError("factor word sets must be non-empty")
    if config.image_size < 8:
        raise ConfigError(f"image_size too small: {config.image_size}")
    n_shapes = len(config.shape_words)
    n_styles = len(config.style_words)
    if n_shapes > len(SHAPE_WORDS) or n_styles > len(STYLE_WORDS):
        raise ConfigError("more factor words than available procedural factors")

    gen = torch.Generator().manual_seed(config.seed)
    obj_train = templates.train_indices(templates.OBJECT_TEMPLATES)
    sty_train = templates.train_indices(templates.STYLE_TEMPLATES)
    multi_train = templates.train_indices(templates.MULTI_TEMPLATES)

    images, prompts, shape_labels, style_labels = [], [], [], []

    def pick(seq):
        return seq[torch.randint(0, len(seq), (), generator=gen).item()]

    for si in range(n_shapes):
        for _ in range(config.samples_per_concept):
            images.append(render_concept_image(config.image_size, shape_idx=si, rng=gen))
            tpl = templates.OBJECT_TEMPLATES[pick(obj_train)]
            prompts.append(tpl.format(config.shape_words[si]))
            shape_labels.append(si)
            style_labels.append(-1)
    for yi in range(n_styles):
        for _ in range(config.samples_per_concept):
            images.append(render_concept_image(config.image_size, style_idx=yi, rng=gen))
            tpl = templates.STYLE_TEMPLATES[pick(sty_train)]
            prompts.append(tpl.format(config.style_words[yi]))
            shape_labels.append(-1)
            style_labels.append(yi)
    for _ in range(config.pair_samples):
        si = torch.randint(0, n_shapes, (), generator=gen).item()
        yi = torch.randint(0, n_styles, (), generator=gen).item()
        images.append(render_concept_image(config.image_size, shape_idx=si, style_idx=yi, rng=gen))
        tpl = templates.MULTI_TEMPLATES[pick(multi_train)]
        prompts.append(tpl.format(object=config.shape_words[si], style=config.style_words[yi]))
        shape_labels.append(si)
        style_labels.append(yi)

    return SyntheticDataset(
        images=torch.stack(images),
        prompts=prompts,
        shape_labels=torch.tensor(shape_labels, dtype=torch.long),
        style_labels=torch.tensor(style_labels, dtype=torch.long),
        config=config,
    )


# --------------------------------------------------------------------------
# toy denoiser backend


def _timestep_embedding(t: float, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(50.0), half, dtype=torch.float64))
    angles = freqs * t * math.pi
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    if emb.shape[0] < dim:
        emb = torch.cat([emb, torch.zeros(dim - emb.shape[0], dtype=torch.float64)])
    return emb.to(dtype)


class _ResBlock(nn.Module):
    def __init__(self, channels, groups, dtype):
        super().__init__()
        self.gn1 = nn.GroupNorm(groups, channels, dtype=dtype)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)
        self.gn2 = nn.GroupNorm(groups, channels, dtype=dtype)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, dtype=dtype)

    def forward(self, x, scale, shift):
        h = self.gn1(x)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv1(F.silu(h))
        h = self.conv2(F.silu(self.gn2(h)))
        return x + h


class ToyDenoiser(nn.Module):
    """Predicts x0 from (x_t, t, cond); cond modulates each block."""

    def __init__(self, channels: int = 24, blocks: int = 2, embedding_dim: int = 32,
                 t_dim: int = 16, image_size: int = 32, dtype=torch.float32):
        super().__init__()
        self.channels = channels
        self.image_size = image_size
        self.t_dim = t_dim
        groups = 4 if channels % 4 == 0 else 1
        self.stem = nn.Conv2d(3, channels, 4, stride=2, padding=1, dtype=dtype)
        self.blocks = nn.ModuleList(_ResBlock(channels, groups, dtype) for _ in range(blocks))
        self.cond_mlp = nn.Sequential(
            nn.Linear(embedding_dim + t_dim, 96, dtype=dtype),
            nn.SiLU(),
            nn.Linear(96, 2 * channels * blocks, dtype=dtype),
        )
        self.head_norm = nn.GroupNorm(groups, channels, dtype=dtype)
        self.head = nn.Conv2d(channels, 3, 3, padding=1, dtype=dtype)

    def forward(self, x_t: torch.Tensor, t_frac: float, cond: torch.Tensor) -> torch.Tensor:
        dtype = x_t.dtype
        t_emb = _timestep_embedding(t_frac, self.t_dim, dtype).to(x_t.device)
        film = self.cond_mlp(torch.cat([cond, t_emb.expand(cond.shape[0], -1)], dim=-1))
        film = film.reshape(cond.shape[0], len(self.blocks), 2, self.channels)
        h = self.stem(x_t)
        for i, block in enumerate(self.blocks):
            h = block(h, film[:, i, 0], film[:, i, 1])
        h = F.silu(self.head_norm(h))
        h = F.interpolate(h, size=(self.image_size, self.image_size), mode="nearest")
        y = self.head(h)
        return 0.5 * (torch.tanh(y) + 1.0)


@dataclass
class GeneratorConfig:
    image_size: int = 32
    channels: int = 24
    blocks: int = 2
    embedding_dim: int = 32
    num_steps: int = 4
    alpha_bar_start: float = 0.8
    alpha_bar_end: float = 0.05
    pretrain_steps: int = 2500
    pretrain_batch: int = 16
    pretrain_lr: float = 2e-3
    seed: int = 0


def _alpha_bar_schedule(start, end, steps, dtype):
    # geometric interpolation; index 0 is the fully denoised endpoint
    bar = torch.exp(torch.linspace(math.log(start), math.log(end), steps, dtype=torch.float64))
    return torch.cat([torch.ones(1, dtype=torch.float64), bar]).to(dtype)


class ToyGeneratorBackend:
    """Deterministic few-step conditional sampler over the toy denoiser."""

    def __init__(self, denoiser: ToyDenoiser, config: GeneratorConfig, dtype=torch.float32):
        self.denoiser = denoiser
        self.config = config
        self.dtype = dtype
        self.latent_shape = (3, config.image_size, config.image_size)
        self.image_shape = (3, config.image_size, config.image_size)
        self.num_steps = config.num_steps
        self.pretrain_log = []

    def parameters(self):
        return self.denoiser.parameters()

    def sample_batch(self, z: torch.Tensor, cond: torch.Tensor, steps: int = None) -> torch.Tensor:
        """(B, C, H, W) noise + (B, d) cond -> (B, 3, H, W) images in [0,1]."""
        steps = steps or self.num_steps
        if z.shape[1:] != self.latent_shape:
            raise ShapeMismatch(
                f"noise shape {tuple(z.shape[1:])} does not match latent {self.latent_shape}"
            )
        bar = _alpha_bar_schedule(
            self.config.alpha_bar_start, self.config.alpha_bar_end, steps, z.dtype
        ).to(z.device)
        x = z
        for t in range(steps, 0, -1):
            x0_hat = self.denoiser(x, t / steps, cond)
            a_t, a_prev = bar[t], bar[t - 1]
            eps = (x - torch.sqrt(a_t) * x0_hat) / torch.sqrt(1.0 - a_t)
            if t > 1:
                x = torch.sqrt(a_prev) * x0_hat + torch.sqrt(1.0 - a_prev) * eps
            else:
                x = x0_hat
        return x.clamp(0.0, 1.0)


def pooled_condition(embedding: PromptEmbedding) -> torch.Tensor:
    """Summed token embeddings; length-independent weight for content words."""
    return embedding.tokens.sum(dim=0)


def generate(backend: ToyGeneratorBackend, z: NoiseTensor, embedding: PromptEmbedding,
             steps: int = None, seed: int = 0) -> ImageTensor:
    """DM(z, E) -> image. Deterministic; the sampler draws no randomness,
    so seed is recorded as provenance only."""
    if tuple(z.values.shape) != backend.latent_shape:
        raise ShapeMismatch(
            f"noise shape {tuple(z.values.shape)} does not match latent {backend.latent_shape}"
        )
    cond = pooled_condition(embedding).unsqueeze(0)
    out = backend.sample_batch(z.values.unsqueeze(0), cond, steps=steps)[0]
    return ImageTensor(values=out, provenance={"seed": seed, "steps": steps or backend.num_steps})


def clean_counterpart(backend: ToyGeneratorBackend, z: NoiseTensor, embedding: PromptEmbedding,
                      steps: int = None, seed: int = 0) -> ImageTensor:
    """Same sampler on unperturbed inputs; the pixel-aligned reference pair."""
    return generate(backend, z, embedding, steps=steps, seed=seed)


def sample_noise(latent_shape, seed: int, dtype=torch.float32) -> NoiseTensor:
    gen = torch.Generator().manual_seed(seed)
    values = torch.randn(*latent_shape, generator=gen, dtype=dtype)
    return NoiseTensor(values=values, seed=seed)


def train_toy_generator(dataset: SyntheticDataset, config: GeneratorConfig,
                        table: TokenEmbeddingTable, dtype=torch.float32) -> ToyGeneratorBackend:
    """Pretrain the denoiser to reconstruct dataset images from noised copies."""
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    torch.manual_seed(config.seed)
    denoiser = ToyDenoiser(
        channels=config.channels, blocks=config.blocks,
        embedding_dim=config.embedding_dim, image_size=config.image_size, dtype=dtype,
    )
    backend = ToyGeneratorBackend(denoiser, config, dtype=dtype)
    conds = torch.stack(
        [pooled_condition(embed_prompt(p, table)) for p in dataset.prompts]
    ).to(dtype)
    images = dataset.images.to(dtype)

    bar = _alpha_bar_schedule(config.alpha_bar_start, config.alpha_bar_end,
                              config.num_steps, dtype)
    opt = torch.optim.Adam(denoiser.parameters(), lr=config.pretrain_lr)
    gen = torch.Generator().manual_seed(config.seed + 1)
    n = len(dataset)
    for step in range(config.pretrain_steps):
        idx = torch.randint(0, n, (config.pretrain_batch,), generator=gen)
        x0 = images[idx]
        cond = conds[idx]
        t = torch.randint(1, config.num_steps + 1, (1,), generator=gen).item()
        noise = torch.randn(x0.shape, generator=gen, dtype=dtype)
        x_t = torch.sqrt(bar[t]) * x0 + torch.sqrt(1.0 - bar[t]) * noise
        pred = denoiser(x_t, t / config.num_steps, cond)
        loss = F.mse_loss(pred, x0)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"generator pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == config.pretrain_steps - 1:
            backend.pretrain_log.append((step, float(loss.detach())))
    denoiser.eval()
    for p in denoiser.parameters():
        p.requires_grad_(False)
    return backend


# --------------------------------------------------------------------------
# image I/O


def save_image_png(image: ImageTensor, path) -> None:
    arr = torch.round(image.values.clamp(0, 1) * 255.0).to(torch.uint8)
    arr = arr.permute(1, 2, 0).contiguous().numpy()
    try:
        Image.fromarray(arr, mode="RGB").save(str(path), format="PNG")
        sidecar = str(path) + ".json"
        with open(sidecar, "w", encoding="utf-8") as fh:
            json.dump(image.provenance, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write image to {path}: {exc}")


def load_image_png(path) -> ImageTensor:
    try:
        with Image.open(str(path)) as im:
            arr = torch.frombuffer(
                bytearray(im.convert("RGB").tobytes()), dtype=torch.uint8
            ).reshape(im.height, im.width, 3)
    except OSError as exc:
        raise IoError(f"cannot read image from {path}: {exc}")
    values = arr.permute(2, 0, 1).to(torch.float32) / 255.0
    provenance = {}
    sidecar = str(path) + ".json"
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            provenance = json.load(fh)
    except (OSError, json.JSONDecodeError):
        pass
    return ImageTensor(values=values, provenance=provenance)
