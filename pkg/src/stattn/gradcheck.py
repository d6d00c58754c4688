"""Finite-difference audit of every parameter gradient of the full training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, UsageError, analytic_grads, numeric_grad, relative_error
from .losses import LossWeights, total_loss
from .temporal import AttentionModel, forward_batch

MAX_PARAMS = 50_000
THRESHOLD = 1e-3
FLOOR = 1e-6  # denominator floor, scaled by max(1, |loss|)


@dataclass
class GradcheckConfig:
    channels: int = 4
    size: int = 7
    n_frames: int = 4
    n_classes: int = 3
    hidden: int = 8
    mask_c1: int = 4
    mask_c2: int = 4
    energy_width: int = 4
    batch: int = 1
    step: float = 1e-6
    # regularizers weighted up so their gradients are visible next to the CE term
    lambda_tv: float = 1e-2
    lambda_contrast: float = 1e-2
    lambda_unimodal: float = 1.0


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    sizes: dict[str, int]
    seconds: float
    threshold: float = THRESHOLD
    loss: float = float("nan")
    rows: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.threshold)

    def lines(self) -> list[str]:
        width = max(len(n) for n in self.errors)
        out = [f"{n:<{width}}  {self.sizes[n]:>6}  {e:.3e}" for n, e in self.errors.items()]
        out.append(f"max relative error {self.max_error:.3e} (threshold {self.threshold:g}) "
                   f"in {self.seconds:.1f}s: {'PASS' if self.passed else 'FAIL'}")
        return out


def build_toy(cfg: GradcheckConfig, seed: int):
    rng = np.random.default_rng(seed)
    model = AttentionModel(
        feat_channels=cfg.channels,
        n_frames=cfg.n_frames,
        n_classes=cfg.n_classes,
        hidden_channels=cfg.hidden,
        mask_c1=cfg.mask_c1,
        mask_c2=cfg.mask_c2,
        energy_width=cfg.energy_width,
        rng=rng,
    )
    # rescale so the LSTM and sigmoid stay away from saturation at init
    for _, p in model.named_parameters():
        p.data = rng.normal(0.0, 0.3, size=p.shape)
    frames = Tensor(rng.normal(size=(cfg.batch, cfg.n_frames, cfg.channels, cfg.size, cfg.size)))
    labels = rng.integers(0, cfg.n_classes, size=cfg.batch)
    return model, frames, labels


def gradcheck(cfg: GradcheckConfig = GradcheckConfig(), seed: int = 0,
              threshold: float = THRESHOLD) -> GradcheckReport:
    model, frames, labels = build_toy(cfg, seed)
    named = list(model.named_parameters())
    total = sum(p.size for _, p in named)
    if total > MAX_PARAMS:
        raise UsageError(f"gradcheck is for toy models only: {total} parameters > {MAX_PARAMS}")
    weights = LossWeights(cfg.lambda_tv, cfg.lambda_contrast, cfg.lambda_unimodal)

    def loss() -> Tensor:
        out = forward_batch(model, frames)
        return total_loss(out.logits, labels, out.masks, out.attention, weights).graph

    start = time.perf_counter()
    grads = analytic_grads(loss, [p for _, p in named])
    value = loss().item()
    floor = FLOOR * max(1.0, abs(value))
    errors, sizes = {}, {}
    for (name, p), g in zip(named, grads):
        num = numeric_grad(lambda: loss().item(), p, cfg.step)
        errors[name] = relative_error(g, num, floor)
        sizes[name] = p.size
    return GradcheckReport(errors, sizes, time.perf_counter() - start, threshold, value)
