"""Per-frame importance masks and masked features."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import DimensionError, Tensor, ops
from .nn import BatchNorm2d, Conv2d, Module


class MaskNetwork(Module):
    """conv-BN-ReLU, conv-BN-ReLU, conv-sigmoid; all K3 S1 P1 so H x W is kept."""

    def __init__(self, in_channels: int, c1: int = 64, c2: int = 32,
                 rng: np.random.Generator | None = None, final_bias: float = 0.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.conv1 = Conv2d(in_channels, c1, 3, 1, 1, rng)
        self.bn1 = BatchNorm2d(c1)
        self.conv2 = Conv2d(c1, c2, 3, 1, 1, rng)
        self.bn2 = BatchNorm2d(c2)
        self.conv3 = Conv2d(c2, 1, 3, 1, 1, rng)
        self.conv3.bias.data[:] = final_bias

    def __call__(self, x: Tensor) -> Tensor:
        return mask_forward(self, x)


def mask_forward(net: MaskNetwork, x: Tensor) -> Tensor:
    """Importance mask of shape (1, H, W), or (N, 1, H, W) for a stack of frames."""
    channel_axis = x.ndim - 3
    if x.ndim not in (3, 4) or x.shape[channel_axis] != net.in_channels:
        raise DimensionError(
            f"mask network expects {net.in_channels} input channels on axis {channel_axis}, got shape {x.shape}"
        )
    h = ops.relu(net.bn1(net.conv1(x)))
    h = ops.relu(net.bn2(net.conv2(h)))
    return ops.sigmoid(net.conv3(h))


def apply_mask(x: Tensor, mask: Tensor) -> Tensor:
    """X * M with the single-channel mask replicated over every feature channel."""
    if mask.ndim != x.ndim or mask.shape[-2:] != x.shape[-2:] or mask.shape[:-3] != x.shape[:-3]:
        raise DimensionError(f"mask shape {mask.shape} does not fit features {x.shape}")
    return ops.mul(x, ops.expand_channels(mask, x.shape[-3]))


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary 8-bit greyscale PGM; ``image`` values in [0, 1] map to round(255 * v)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"PGM image must be 2-D, got {img.shape}")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)


def export_masks(masks: np.ndarray, out_dir: str | Path, video: str) -> list[Path]:
    """One ``<video>_<frame>_mask.pgm`` per frame (1-based) of an (n, 1, H, W) or (n, H, W) array."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(masks, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[:, 0]
    paths = []
    for i, m in enumerate(arr):
        p = out_dir / f"{video}_{i + 1}_mask.pgm"
        write_pgm(p, m)
        paths.append(p)
    return paths
