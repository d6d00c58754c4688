"""Unimodal and log-concave sequences, and the log-concavity penalty."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import UsageError


def is_unimodal(seq: Sequence[float], tol: float = 0.0) -> bool:
    """True when some peak index m has a non-decreasing run up to m and non-increasing after."""
    a = np.asarray(seq, dtype=np.float64)
    n = a.size
    if n <= 2:
        return True
    rises = a[:-1] <= a[1:] + tol   # rises[j]: a[j] <= a[j+1] + tol
    falls = a[:-1] >= a[1:] - tol   # falls[j]: a[j] >= a[j+1] - tol
    # prefix_ok[m]: every step before index m rises; suffix_ok[m]: every step from m on falls
    prefix_ok = np.concatenate([[True], np.logical_and.accumulate(rises)])
    suffix_ok = np.concatenate([np.logical_and.accumulate(falls[::-1])[::-1], [True]])
    return bool(np.any(prefix_ok & suffix_ok))


def _check_nonneg(a: np.ndarray) -> None:
    if (a < 0).any():
        raise UsageError("log-concavity is defined for non-negative sequences only")


def is_log_concave(seq: Sequence[float]) -> bool:
    """a[i]^2 >= a[i-1] * a[i+1] at every interior index."""
    a = np.asarray(seq, dtype=np.float64)
    _check_nonneg(a)
    if a.size < 3:
        return True
    return bool(np.all(a[1:-1] ** 2 >= a[:-2] * a[2:]))


def logconcave_penalty(seq: Sequence[float]) -> float:
    """sum over interior i of max(0, a[i-1] * a[i+1] - a[i]^2)."""
    a = np.asarray(seq, dtype=np.float64)
    if a.size < 3:
        return 0.0
    return float(np.maximum(0.0, a[:-2] * a[2:] - a[1:-1] ** 2).sum())


def parse_sequence(text: str) -> list[float]:
    """Whitespace- or comma-separated reals."""
    return [float(tok) for tok in text.replace(",", " ").split()]
