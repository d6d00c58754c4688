"""Classification loss plus the mask and attention regularizers.

Every function takes either one video (masks (n, 1, H, W), attention
(n, n), logits (K,)) or a batch with a leading B axis.  Batched inputs
are reduced per video and then averaged over B.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, UsageError, ops


@dataclass(frozen=True)
class LossWeights:
    tv: float = 1e-5
    contrast: float = 1e-4
    unimodal: float = 1.0

    def __post_init__(self):
        if min(self.tv, self.contrast, self.unimodal) < 0:
            raise UsageError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    ce: float
    tv: float
    contrast: float
    unimodal: float
    total: float
    graph: Tensor | None = None  # scalar total still attached to the tape

    def row(self) -> list[float]:
        return [self.ce, self.tv, self.contrast, self.unimodal, self.total]


def _batch_mean(per_all: Tensor, batch: int) -> Tensor:
    return ops.scale(per_all, 1.0 / batch) if batch > 1 else per_all


def cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label]; batched logits (B, K) take a label array."""
    batched = logits.ndim == 2
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu" or (labels < 0).any() or (labels >= k).any():
        raise UsageError(f"label {label!r} outside 0..{k - 1}")
    lp = ops.log_softmax(logits, axis=-1)
    if batched:
        if labels.shape != (logits.shape[0],):
            raise UsageError(f"need {logits.shape[0]} labels, got {labels.shape}")
        picked = ops.getitem(lp, (np.arange(len(labels)), labels))
        return ops.scale(ops.sum(picked), -1.0 / len(labels))
    return ops.scale(ops.getitem(lp, int(labels[0])), -1.0)


def tv_loss(masks: Tensor) -> Tensor:
    """Sum over frames of absolute vertical plus horizontal neighbour differences."""
    batch = masks.shape[0] if masks.ndim == 5 else 1
    vert = ops.abs(ops.sub(masks[..., 1:, :], masks[..., :-1, :])) if masks.shape[-2] > 1 else None
    horiz = ops.abs(ops.sub(masks[..., :, 1:], masks[..., :, :-1])) if masks.shape[-1] > 1 else None
    parts = [ops.sum(t) for t in (vert, horiz) if t is not None]
    if not parts:
        return Tensor(0.0)
    return _batch_mean(ops.add_n(parts), batch)


def binarize(masks: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(masks) > threshold).astype(np.float64)


def contrast_loss(masks: Tensor) -> Tensor:
    """sum(-M*B/2 + M*(1-B)/2) with B = [M > 0.5] held constant."""
    batch = masks.shape[0] if masks.ndim == 5 else 1
    b = binarize(masks.data)
    coef = 0.5 - b  # -1/2 where B=1, +1/2 where B=0
    return _batch_mean(ops.sum(ops.mul_const(masks, coef)), batch)


def unimodal_loss(attention: Tensor) -> Tensor:
    """sum_t sum_{i=2}^{n-1} max(0, w[t,i-1] w[t,i+1] - w[t,i]^2)."""
    batch = attention.shape[0] if attention.ndim == 3 else 1
    n = attention.shape[-1]
    if n < 3:
        return Tensor(0.0)
    left = attention[..., :-2]
    right = attention[..., 2:]
    mid = attention[..., 1:-1]
    gap = ops.sub(ops.mul(left, right), ops.square(mid))
    return _batch_mean(ops.sum(ops.max0(gap)), batch)


def total_loss(logits: Tensor, label, masks: Tensor, attention: Tensor,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    ce = cross_entropy(logits, label)
    tv = tv_loss(masks)
    con = contrast_loss(masks)
    uni = unimodal_loss(attention)
    total = ops.add_n([
        ce,
        ops.scale(tv, weights.tv),
        ops.scale(con, weights.contrast),
        ops.scale(uni, weights.unimodal),
    ])
    return LossBreakdown(
        ce=ce.item(),
        tv=tv.item(),
        contrast=con.item(),
        unimodal=uni.item(),
        total=total.item(),
        graph=total,
    )


METRICS_HEADER = ["step", "ce", "tv", "contrast", "unimodal", "total"]


class MetricsWriter:
    """Appends ``step,ce,tv,contrast,unimodal,total`` rows with round-trip float formatting."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def append(self, step: int, loss: LossBreakdown) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([step] + [repr(float(v)) for v in loss.row()])
