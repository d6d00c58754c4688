"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[[], float], param: Tensor, step: float = 1e-3) -> np.ndarray:
    """d fn / d param by central differences, perturbing ``param.data`` in place."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def analytic_grads(fn: Callable[[], Tensor], params: Iterable[Tensor]) -> list[np.ndarray]:
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    return [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]


def gradient_errors(fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-3,
                    floor: float = 1e-6) -> list[float]:
    """Relative error of backprop against central differences, one entry per parameter.

    The floor is scaled by max(1, |fn|) so that gradients which are exactly
    zero are compared at the resolution central differences can reach.
    """
    params = list(params)
    grads = analytic_grads(fn, params)
    scaled = floor * max(1.0, abs(fn().item()))
    return [
        relative_error(g, numeric_grad(lambda: fn().item(), p, step), scaled)
        for g, p in zip(grads, params)
    ]


def projected(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights); a random ``weights`` probes the full Jacobian."""
    from . import ops

    return ops.sum(ops.mul_const(out, weights))
