"""Query-conditioned secret retrieval.

A frozen feature backbone supplies image patch features and per-token
text features; a trainable projection + single-head cross-attention stack
fuses them into a predicted concept embedding, and a linear decoder maps
that embedding to secret logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    DimensionMismatch,
    DivergenceDetected,
    InsufficientData,
    UnknownConcept,
)
from .generation import ImageTensor, SyntheticDataset, TokenEmbeddingTable, embed_prompt
from .registry import Registry, Secret

DEFAULT_TAU = 0.875


class ToyFeatureBackbone(nn.Module):
    """Small frozen image/text feature extractor.

    The averaging stem low-passes the input before any convolution, which
    keeps features stable under mild compression and noise. Style features
    are channel statistics of the first convolution; semantic features are
    mean-pooled patch features.
    """

    def __init__(self, embedding_dim: int = 32, d_img: int = 48, d_txt: int = 32,
                 width: int = 24, dtype=torch.float32):
        super().__init__()
        self.d_img = d_img
        self.d_txt = d_txt
        self.width = width
        self.pool = nn.AvgPool2d(2)
        self.conv1 = nn.Conv2d(3, width, 3, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(width, width + 8, 3, stride=2, padding=1, dtype=dtype)
        self.conv3 = nn.Conv2d(width + 8, d_img, 3, padding=1, dtype=dtype)
        self.text_mlp = nn.Sequential(
            nn.Linear(embedding_dim, 64, dtype=dtype),
            nn.ReLU(),
            nn.Linear(64, d_txt, dtype=dtype),
        )

    def _early(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv1(self.pool(x)))

    def image_features_batch(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, P, d_img) patch feature sequences."""
        h = self._early(x)
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))
        return h.flatten(2).transpose(1, 2)

    def style_features_batch(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, 2*width) channel means and scales."""
        h = self._early(x)
        mean = h.mean(dim=(2, 3))
        scale = ((h - mean[:, :, None, None]) ** 2).mean(dim=(2, 3))
        return torch.cat([mean, scale], dim=1)

    def semantic_features_batch(self, x: torch.Tensor) -> torch.Tensor:
        return self.image_features_batch(x).mean(dim=1)

    def image_features(self, image: ImageTensor) -> torch.Tensor:
        return self.image_features_batch(image.values.unsqueeze(0))[0]

    def style_features(self, image: ImageTensor) -> torch.Tensor:
        return self.style_features_batch(image.values.unsqueeze(0))[0]

    def semantic_features(self, image: ImageTensor) -> torch.Tensor:
        return self.semantic_features_batch(image.values.unsqueeze(0))[0]

    def text_features(self, query: str, table: TokenEmbeddingTable) -> torch.Tensor:
        """query string -> (L, d_txt) per-token features."""
        rows = embed_prompt(query, table).tokens
        return self.text_mlp(rows)

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


@dataclass
class BackbonePretrainConfig:
    steps: int = 1200
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0
    augment: bool = True


def _augment_batch(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    shifts = torch.randint(-2, 3, (2,), generator=gen).tolist()
    x = torch.roll(x, shifts=shifts, dims=(2, 3))
    if torch.rand((), generator=gen).item() < 0.5:
        x = x + 0.02 * torch.randn(x.shape, generator=gen)
    if torch.rand((), generator=gen).item() < 0.3:
        x = F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), 3, stride=1)
    return x.clamp(0.0, 1.0)


def pretrain_backbone(dataset: SyntheticDataset, table: TokenEmbeddingTable,
                      config: BackbonePretrainConfig, embedding_dim: int = 32,
                      d_img: int = 48, d_txt: int = 32,
                      dtype=torch.float32) -> ToyFeatureBackbone:
    """Train the backbone to classify factors from images and prompts, then
    freeze it. Classifier heads are discarded; only features are kept."""
    torch.manual_seed(config.seed)
    backbone = ToyFeatureBackbone(embedding_dim=embedding_dim, d_img=d_img,
                                  d_txt=d_txt, dtype=dtype)
    n_shapes = len(dataset.config.shape_words)
    n_styles = len(dataset.config.style_words)
    img_shape_head = nn.Linear(d_img, n_shapes + 1, dtype=dtype)
    img_style_head = nn.Linear(d_img, n_styles + 1, dtype=dtype)
    txt_shape_head = nn.Linear(d_txt, n_shapes + 1, dtype=dtype)
    txt_style_head = nn.Linear(d_txt, n_styles + 1, dtype=dtype)

    prompt_rows = [embed_prompt(p, table).tokens.to(dtype) for p in dataset.prompts]

    # -1 labels become the trailing "absent" class
    shape_targets = torch.where(
        dataset.shape_labels >= 0, dataset.shape_labels,
        torch.full_like(dataset.shape_labels, n_shapes),
    )
    style_targets = torch.where(
        dataset.style_labels >= 0, dataset.style_labels,
        torch.full_like(dataset.style_labels, n_styles),
    )

    params = (
        list(backbone.parameters())
        + list(img_shape_head.parameters()) + list(img_style_head.parameters())
        + list(txt_shape_head.parameters()) + list(txt_style_head.parameters())
    )
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed + 1)
    n = len(dataset)
    for step in range(config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        x = dataset.images[idx].to(dtype)
        if config.augment:
            x = _augment_batch(x, gen)
        pooled = backbone.semantic_features_batch(x)
        loss = F.cross_entropy(img_shape_head(pooled), shape_targets[idx])
        loss = loss + F.cross_entropy(img_style_head(pooled), style_targets[idx])
        txt = torch.stack([backbone.text_mlp(prompt_rows[i]).mean(dim=0) for i in idx.tolist()])
        loss = loss + F.cross_entropy(txt_shape_head(txt), shape_targets[idx])
        loss = loss + F.cross_entropy(txt_style_head(txt), style_targets[idx])
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"backbone pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return backbone.freeze()


class RetrievalNet(nn.Module):
    """proj2(mean-pool(attn(text queries, projected image patches)))."""

    def __init__(self, d_img: int = 48, d_txt: int = 32, d_out: int = 32,
                 dtype=torch.float32):
        super().__init__()
        self.d_img = d_img
        self.d_txt = d_txt
        self.d_out = d_out
        self.proj1 = nn.Linear(d_img, d_txt, dtype=dtype)
        self.wq = nn.Linear(d_txt, d_txt, dtype=dtype)
        self.wk = nn.Linear(d_txt, d_txt, dtype=dtype)
        self.wv = nn.Linear(d_txt, d_txt, dtype=dtype)
        self.wo = nn.Linear(d_txt, d_txt, dtype=dtype)
        self.proj2 = nn.Linear(d_txt, d_out, dtype=dtype)

    def forward(self, img_feats: torch.Tensor, txt_feats: torch.Tensor,
                txt_mask: torch.Tensor = None) -> torch.Tensor:
        """(B, P, d_img), (B, L, d_txt), optional (B, L) mask -> (B, d_out)."""
        if img_feats.shape[-1] != self.d_img:
            raise DimensionMismatch(
                f"image feature dim {img_feats.shape[-1]}, expected {self.d_img}"
            )
        if txt_feats.shape[-1] != self.d_txt:
            raise DimensionMismatch(
                f"text feature dim {txt_feats.shape[-1]}, expected {self.d_txt}"
            )
        kv = self.proj1(img_feats)
        q = self.wq(txt_feats)
        k = self.wk(kv)
        v = self.wv(kv)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.d_txt)
        fused = txt_feats + self.wo(F.softmax(scores, dim=-1) @ v)
        if txt_mask is None:
            pooled = fused.mean(dim=1)
        else:
            w = txt_mask.to(fused.dtype).unsqueeze(-1)
            pooled = (fused * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)
        return self.proj2(pooled)


def predict_embedding(retriever: RetrievalNet, backbone: ToyFeatureBackbone,
                      table: TokenEmbeddingTable, image: ImageTensor,
                      query: str) -> torch.Tensor:
    """Predict the concept embedding for one (image, query) pair."""
    img_feats = backbone.image_features(image).unsqueeze(0)
    txt_feats = backbone.text_features(query, table).unsqueeze(0)
    return retriever(img_feats, txt_feats)[0]


def decode_secret(decoder: nn.Linear, embedding: torch.Tensor) -> torch.Tensor:
    if embedding.shape[-1] != decoder.in_features:
        raise DimensionMismatch(
            f"embedding dim {embedding.shape[-1]}, decoder expects {decoder.in_features}"
        )
    return decoder(embedding)


def binarize(logits: torch.Tensor, threshold: float = 0.5) -> Secret:
    """bit = 1 iff sigmoid(logit) > threshold; exact ties resolve to 0."""
    probs = torch.sigmoid(logits.detach())
    return Secret(tuple(int(p > threshold) for p in probs.flatten().tolist()))


@dataclass
class AttributionResult:
    concept_id: str
    retrieved_secret: Secret
    bit_accuracy: float
    match: bool
    predicted_embedding: torch.Tensor
    tau: float

    def to_dict(self) -> dict:
        return {
            "concept_id": self.concept_id,
            "bits": list(self.retrieved_secret.bits),
            "bit_accuracy": self.bit_accuracy,
            "match": self.match,
            "tau": self.tau,
        }


def attribute(model, registry: Registry, image: ImageTensor, concept_id: str,
              tau: float = DEFAULT_TAU) -> AttributionResult:
    """Retrieve the secret for one concept and compare against the registry.

    model must expose retriever, decoder, backbone, and table attributes;
    inference is read-only.
    """
    record = registry.get(concept_id)
    query = registry.render_query(concept_id)
    with torch.no_grad():
        embedding = predict_embedding(model.retriever, model.backbone, model.table,
                                      image, query)
        logits = decode_secret(model.decoder, embedding)
    retrieved = binarize(logits)
    matches = sum(a == b for a, b in zip(retrieved.bits, record.secret.bits))
    bit_acc = matches / len(record.secret)
    return AttributionResult(
        concept_id=concept_id,
        retrieved_secret=retrieved,
        bit_accuracy=bit_acc,
        match=bit_acc >= tau,
        predicted_embedding=embedding,
        tau=tau,
    )


def attribute_multi(model, registry: Registry, image: ImageTensor,
                    concept_ids, tau: float = DEFAULT_TAU) -> list:
    """Independent attribute call per concept; output order matches input."""
    return [attribute(model, registry, image, cid, tau=tau) for cid in concept_ids]


def embedding_separation(model, registry: Registry, images_by_concept: dict,
                         cap: float = 1e6) -> float:
    """Mean inter-centroid distance over mean intra-concept distance of
    predicted embeddings; a degenerate zero intra distance reports cap."""
    if len(images_by_concept) < 2:
        raise InsufficientData("separation needs at least 2 concepts")
    centroids = {}
    intra = []
    for cid, images in images_by_concept.items():
        if len(images) < 2:
            raise InsufficientData(f"concept {cid!r} needs at least 2 images")
        if cid not in registry:
            raise UnknownConcept(f"no concept registered with id {cid!r}")
        query = registry.render_query(cid)
        with torch.no_grad():
            embs = torch.stack([
                predict_embedding(model.retriever, model.backbone, model.table,
                                  img, query)
                for img in images
            ])
        centroid = embs.mean(dim=0)
        centroids[cid] = centroid
        intra.extend((embs - centroid).norm(dim=1).tolist())
    cids = list(centroids)
    inter = [
        (centroids[a] - centroids[b]).norm().item()
        for i, a in enumerate(cids) for b in cids[i + 1:]
    ]
    mean_intra = sum(intra) / len(intra)
    mean_inter = sum(inter) / len(inter)
    if mean_intra == 0.0:
        return cap
    return min(mean_inter / mean_intra, cap)
