"""Small strided CNN producing per-frame feature maps from greyscale frames."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, ops
from .nn import BatchNorm2d, Conv2d, Module


class FrameEncoder(Module):
    """K3 P1 conv-BN-ReLU layers: 1 x 56 x 56 -> C x 7 x 7 with the default stride 2 everywhere."""

    def __init__(self, widths: Sequence[int] = (8, 16, 8), frame_size: tuple[int, int] = (56, 56),
                 rng: np.random.Generator | None = None, strides: Sequence[int] | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.frame_size = tuple(frame_size)
        self.strides = tuple(strides) if strides is not None else (2,) * len(widths)
        if len(self.strides) != len(widths) or min(self.strides) < 1:
            raise DimensionError(f"need one positive stride per layer, got {self.strides} for {len(widths)} layers")
        chans = [1, *widths]
        self.convs = [Conv2d(chans[i], chans[i + 1], 3, s, 1, rng) for i, s in enumerate(self.strides)]
        self.norms = [BatchNorm2d(w) for w in widths]

    @property
    def out_channels(self) -> int:
        return self.norms[-1].gamma.shape[0]

    def feature_size(self) -> tuple[int, int]:
        h, w = self.frame_size
        for s in self.strides:
            h, w = (h - 1) // s + 1, (w - 1) // s + 1
        return h, w

    def __call__(self, frames: Tensor) -> Tensor:
        """(N, H, W) or (N, 1, H, W) frames -> (N, C, h, w) features."""
        x = frames if frames.ndim == 4 else ops.reshape(frames, (frames.shape[0], 1) + frames.shape[1:])
        if x.shape[-2:] != self.frame_size:
            raise DimensionError(f"encoder built for {self.frame_size} frames, got {x.shape[-2:]}")
        for conv, bn in zip(self.convs, self.norms):
            x = ops.relu(bn(conv(x)))
        return x


def frame_features(frames: np.ndarray | Tensor, extractor: FrameEncoder) -> Tensor:
    """Features (n, C, h, w) of one video's (n, H, W) frames."""
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float64))
    return extractor(x)
