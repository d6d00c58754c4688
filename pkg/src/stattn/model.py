"""Full video classifier: frame encoder followed by the attention stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, UsageError, ops
from .features import FrameEncoder
from .nn import Module
from .temporal import AttentionModel, VideoOutput, forward_batch


@dataclass
class ModelSpec:
    n_frames: int = 8
    n_classes: int = 4
    frame_height: int = 56
    frame_width: int = 56
    feat_channels: int = 8
    hidden: int = 16
    mask_c1: int = 64
    mask_c2: int = 32
    energy_width: int = 8
    aggregate_prefactor: bool = True
    mask_bias: float = 0.0
    feature_stride: int = 4  # total encoder downsampling, a power of two up to 8


def encoder_strides(total: int) -> tuple[int, int, int]:
    """Per-layer strides for the three encoder layers, stride-2 layers first."""
    if total not in (1, 2, 4, 8):
        raise UsageError(f"feature_stride must be 1, 2, 4 or 8, got {total}")
    halvings = total.bit_length() - 1
    return tuple(2 if i < halvings else 1 for i in range(3))


class VideoModel(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.encoder = FrameEncoder(
            (8, 16, spec.feat_channels), (spec.frame_height, spec.frame_width), rng,
            strides=encoder_strides(spec.feature_stride),
        )
        self.attention = AttentionModel(
            feat_channels=spec.feat_channels,
            n_frames=spec.n_frames,
            n_classes=spec.n_classes,
            hidden_channels=spec.hidden,
            mask_c1=spec.mask_c1,
            mask_c2=spec.mask_c2,
            energy_width=spec.energy_width,
            aggregate_prefactor=spec.aggregate_prefactor,
            mask_bias=spec.mask_bias,
            rng=rng,
        )

    def __call__(self, frames: np.ndarray | Tensor) -> VideoOutput:
        """(B, n, H, W) greyscale frames -> batched logits, attention, masks."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
        b, n, h, w = x.shape
        feats = self.encoder(ops.reshape(x, (b * n, 1, h, w)))
        c, fh, fw = feats.shape[1:]
        return forward_batch(self.attention, ops.reshape(feats, (b, n, c, fh, fw)))
