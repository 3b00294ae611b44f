"""Image-text contrastive loss and prefix causal language modeling loss."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor

__all__ = [
    "Pooling",
    "ItcConfig",
    "pair_similarity",
    "similarity_matrix",
    "itc_from_similarity",
    "itc_loss",
    "pclm_loss",
]


class Pooling(str, enum.Enum):
    MAX = "max"
    MEAN = "mean"

    @classmethod
    def parse(cls, value) -> "Pooling":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower()
        if v in ("max", "maxoverprompts"):
            return cls.MAX
        if v in ("mean", "meanoverprompts"):
            return cls.MEAN
        raise ValueError(f"unknown pooling {value!r}")


@dataclass(frozen=True)
class ItcConfig:
    temperature: float = 0.07
    pooling: Pooling = Pooling.MAX

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "pooling", Pooling.parse(self.pooling))


def _pool(sims: Tensor, pooling: Pooling, axis: int) -> Tensor:
    if pooling is Pooling.MAX:
        return ad.max(sims, axis=axis)
    return ad.mean(sims, axis=axis)


def similarity_matrix(prompt_outputs: Tensor, cls_outputs: Tensor,
                      pooling: Pooling = Pooling.MAX) -> Tensor:
    """S[u, k]: pooled cosine similarity of image u's prompts with text k's [CLS]."""
    if prompt_outputs.ndim != 3 or cls_outputs.ndim != 2:
        raise ShapeError(f"expected [B, P, d] and [B, d], got {prompt_outputs.shape} and {cls_outputs.shape}")
    b, p, d = prompt_outputs.shape
    if cls_outputs.shape[1] != d:
        raise ShapeError(f"prompt width {d} != text width {cls_outputs.shape[1]}")
    zn = ad.l2_normalize(prompt_outputs, axis=-1)
    cn = ad.l2_normalize(cls_outputs, axis=-1)
    sims = ad.matmul(ad.reshape(zn, (b * p, d)), ad.transpose(cn, (1, 0)))
    return _pool(ad.reshape(sims, (b, p, cls_outputs.shape[0])), Pooling.parse(pooling), axis=1)


def pair_similarity(z_hat, cls, pooling: Pooling = Pooling.MAX) -> float:
    """Pooled cosine similarity between one image's prompt rows and one [CLS] vector."""
    z = z_hat.data if isinstance(z_hat, Tensor) else np.asarray(z_hat, dtype=np.float64)
    c = cls.data if isinstance(cls, Tensor) else np.asarray(cls, dtype=np.float64)
    with ad.no_grad():
        s = similarity_matrix(Tensor(z[None]), Tensor(c[None]), pooling)
    return float(s.data[0, 0])


def itc_from_similarity(sim: Tensor, temperature: float = 0.07) -> Tensor:
    """Symmetric InfoNCE over a [B, B] similarity matrix with positives on the diagonal."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    b = sim.shape[0]
    if b < 2:
        raise ContractError("contrastive loss needs a batch of at least 2 pairs")
    logits = ad.scale(sim, 1.0 / temperature)
    targets = np.arange(b)
    image_to_text = ad.cross_entropy(logits, targets)
    text_to_image = ad.cross_entropy(ad.transpose(logits, (1, 0)), targets)
    return ad.add(image_to_text, text_to_image)


def itc_loss(prompt_outputs: Tensor, cls_outputs: Tensor,
             cfg: ItcConfig = ItcConfig()) -> tuple[Tensor, np.ndarray]:
    """Bidirectional contrastive loss and the similarity matrix it was computed from."""
    if prompt_outputs.shape[0] != cls_outputs.shape[0]:
        raise ShapeError(f"batch mismatch: {prompt_outputs.shape[0]} images, {cls_outputs.shape[0]} texts")
    sim = similarity_matrix(prompt_outputs, cls_outputs, cfg.pooling)
    return itc_from_similarity(sim, cfg.temperature), sim.data.copy()


def pclm_loss(logits: Tensor, targets, prefix_len: int = 0, pad_id: int = 0) -> Tensor:
    """Mean next-token cross-entropy over non-pad text positions.

    ``logits`` may cover only the text rows (``[..., T, V]``) or the whole
    prefixed sequence (``[..., P + T, V]``); in the latter case the first
    ``prefix_len`` rows are ignored.
    """
    targets = np.asarray(targets, dtype=np.int64)
    t = targets.shape[-1]
    rows = logits.shape[-2]
    if rows == t + prefix_len and prefix_len > 0:
        idx = (Ellipsis, slice(prefix_len, prefix_len + t), slice(None))
        logits = ad.getitem(logits, idx)
    elif rows != t:
        raise ShapeError(f"logits cover {rows} positions; expected {t} or {t + prefix_len}")
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    weights = (targets != pad_id).astype(np.float64)
    if weights.sum() == 0:
        raise ContractError("every target position is padding; mean loss undefined")
    return ad.cross_entropy(logits, targets, weights)
