"""Classification, pixel-alignment and feature-alignment losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nncore import Tensor, ops
from .nncore.tensor import log_decision, make_result

CLS_MODES = ("literal", "per_sample")
PA_REDUCTIONS = ("sum", "mean")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # classification
    beta: float = 1.0  # pixel alignment
    gamma: float = 1.0  # feature alignment

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")

    def as_tuple(self):
        return self.alpha, self.beta, self.gamma


def cls_loss(logits: Tensor, labels, mode: str = "literal") -> Tensor:
    """Softmax cross-entropy.

    ``literal`` averages over samples *and* classes, i.e. the usual mean
    cross-entropy divided by the class count; ``per_sample`` is the usual
    mean cross-entropy.
    """
    if mode not in CLS_MODES:
        raise ValueError(f"unknown classification mode {mode!r}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    denom = n * c if mode == "literal" else n
    value = -logp[np.arange(n), labels].sum() / denom

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / denom),)

    return make_result(np.asarray(value, dtype=logits.dtype), (logits,), back, "cls_loss")


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def pixel_align_loss(x_w, x_recon: Tensor, reduction: str = "sum") -> Tensor:
    """Per-sample L1 norm of the reconstruction error, averaged over the batch.

    ``reduction="mean"`` also divides by the per-sample element count, i.e.
    the mean absolute error.
    """
    if reduction not in PA_REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    x_w = x_w if isinstance(x_w, Tensor) else Tensor(np.asarray(x_w, dtype=x_recon.dtype))
    _check_same(x_w, x_recon, "pixel_align_loss")
    n = x_recon.shape[0] if reduction == "sum" else x_recon.data.size
    diff = x_recon.data - x_w.data
    log_decision(diff > 0)
    value = np.abs(diff).sum() / n

    def back(g):
        s = np.sign(diff) * (g / n)
        return -s, s

    return make_result(np.asarray(value, dtype=x_recon.dtype), (x_w, x_recon), back, "pixel_align_loss")


def feature_align_loss(g_agg: Tensor, g_emb: Tensor) -> Tensor:
    """Squared L2 distance between pooled vectors, averaged over the batch.

    Gradients flow into both arguments.
    """
    _check_same(g_agg, g_emb, "feature_align_loss")
    n = g_agg.shape[0]
    diff = g_agg.data - g_emb.data
    value = (diff * diff).sum() / n

    def back(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return make_result(np.asarray(value, dtype=g_agg.dtype), (g_agg, g_emb), back, "feature_align_loss")


def total_loss(l_cls: Optional[Tensor], l_pa: Optional[Tensor], l_fa: Optional[Tensor],
               w: LossWeights = LossWeights()) -> Tensor:
    """alpha * L_cls + beta * L_pa + gamma * L_fa. Terms with zero weight may be ``None``."""
    total = None
    for part, weight in zip((l_cls, l_pa, l_fa), w.as_tuple()):
        if weight == 0:
            continue
        if part is None:
            raise ValueError("a loss term with non-zero weight is missing")
        if not np.isfinite(part.data).all():
            raise FloatingPointError("non-finite loss term")
        term = part if weight == 1 else ops.mul(part, weight)
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ValueError("all loss weights are zero")
    return total
