"""Deterministic moving-sprite videos with exact spatial and temporal ground truth.

Random numbers come from SplitMix64 (Steele, Lea & Flood 2014) used as a
counter-based generator: draw k of a stream seeded with s is
``mix(s + (k + 1) * 0x9E3779B97F4A7C15 mod 2**64)``.  Uniform doubles are
``(u64 >> 11) * 2**-53``; normals use Box-Muller on consecutive uniform
pairs, ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.  Per-video seeds are
``derive_seed(seed, video_index)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import UsageError
from .config import config_to_text
from .localization import BBox, GroundTruth, Segment, write_ground_truth

_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1

CLASS_NAMES = ("translate-right", "translate-down", "oscillate", "grow")


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    s = seed & _MASK64
    for k in keys:
        s = int(_mix(np.array([(s + (k + 1) * _GAMMA) & _MASK64], dtype=np.uint64))[0])
    return s


class SplitMix64:
    """Seedable stream; every call advances the counter by the number of draws."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self, count: int) -> np.ndarray:
        k = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(_GAMMA)
        self.state = (self.state + count * _GAMMA) & _MASK64
        return _mix(z)

    def uniform(self, count: int) -> np.ndarray:
        return (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, count: int) -> np.ndarray:
        u = self.uniform(2 * count)
        return np.sqrt(-2.0 * np.log1p(-u[0::2])) * np.cos(2.0 * np.pi * u[1::2])

    def integer(self, low: int, high: int) -> int:
        """Integer in [low, high] inclusive."""
        return low + int(self.uniform(1)[0] * (high - low + 1))


@dataclass
class SynthConfig:
    n_frames: int = 8
    height: int = 56
    width: int = 56
    n_classes: int = 4
    sprite_size: int = 20
    t_a: int = 3           # first action frame, 1-based inclusive
    t_b: int = 6           # last action frame, 1-based inclusive
    step: int = 6          # pixels per frame for translation / oscillation
    grow: int = 4          # side-length increase per frame for the grow class
    noise: float = 0.05    # per-frame gaussian noise sigma
    background: float = 0.2
    texture: float = 0.1   # amplitude of the static per-video background texture
    sprite_level: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.t_a <= self.t_b <= self.n_frames:
            raise UsageError(f"action window [{self.t_a}, {self.t_b}] must lie in 1..{self.n_frames}")
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise UsageError(f"n_classes must be in 1..{len(CLASS_NAMES)}")
        if self.sprite_size < 1 or self.sprite_size > min(self.height, self.width):
            raise UsageError("sprite does not fit in the frame")

    @property
    def window(self) -> int:
        return self.t_b - self.t_a + 1


@dataclass
class LabeledVideo:
    video_id: str
    frames: np.ndarray                 # (n, H, W) float32 in [0, 1]
    label: int
    gt_boxes: list[BBox | None]
    gt_segment: Segment
    clamped: bool = False

    def ground_truth(self) -> tuple[list[GroundTruth], GroundTruth]:
        spatial = [
            GroundTruth(self.video_id, self.label, box, frame=i + 1)
            for i, box in enumerate(self.gt_boxes)
            if box is not None
        ]
        return spatial, GroundTruth(self.video_id, self.label, self.gt_segment)


def _trajectory(cfg: SynthConfig, label: int, rng: SplitMix64) -> list[tuple[int, int, int]]:
    """(x, y, size) of the sprite's top-left corner for each in-window frame."""
    L, s, st = cfg.window, cfg.sprite_size, cfg.step
    H, W = cfg.height, cfg.width
    name = CLASS_NAMES[label]
    if name == "translate-right":
        x0 = rng.integer(0, max(0, W - s - (L - 1) * st))
        y0 = rng.integer(0, H - s)
        return [(x0 + k * st, y0, s) for k in range(L)]
    if name == "translate-down":
        x0 = rng.integer(0, W - s)
        y0 = rng.integer(0, max(0, H - s - (L - 1) * st))
        return [(x0, y0 + k * st, s) for k in range(L)]
    if name == "oscillate":
        x0 = rng.integer(0, max(0, W - s - st))
        y0 = rng.integer(0, max(0, H - s - st))
        return [(x0 + (k % 2) * st, y0 + (k % 2) * st, s) for k in range(L)]
    # grow: centred square whose side increases by cfg.grow per frame
    s0 = max(2, s - cfg.grow * ((L - 1) // 2))
    s_max = s0 + cfg.grow * (L - 1)
    cx = rng.integer(s_max // 2, max(s_max // 2, W - (s_max - s_max // 2)))
    cy = rng.integer(s_max // 2, max(s_max // 2, H - (s_max - s_max // 2)))
    out = []
    for k in range(L):
        size = s0 + cfg.grow * k
        out.append((cx - size // 2, cy - size // 2, size))
    return out


def generate_video(cfg: SynthConfig, label: int, seed: int, video_id: str = "v") -> LabeledVideo:
    """Pure function of (cfg, label, seed)."""
    if not 0 <= label < cfg.n_classes:
        raise UsageError(f"class {label} outside 0..{cfg.n_classes - 1}")
    rng = SplitMix64(seed)
    n, H, W = cfg.n_frames, cfg.height, cfg.width
    traj = _trajectory(cfg, label, rng)
    texture = cfg.background + cfg.texture * rng.uniform(H * W).reshape(H, W)

    frames = np.empty((n, H, W))
    boxes: list[BBox | None] = [None] * n
    clamped = False
    for i in range(n):
        img = texture + cfg.noise * rng.normal(H * W).reshape(H, W) if cfg.noise > 0 else texture.copy()
        t = i + 1
        if cfg.t_a <= t <= cfg.t_b:
            x, y, size = traj[t - cfg.t_a]
            x0, y0 = max(0, x), max(0, y)
            x1, y1 = min(W, x + size), min(H, y + size)
            if (x0, y0, x1, y1) != (x, y, x + size, y + size):
                clamped = True
            if x1 <= x0 or y1 <= y0:
                raise UsageError(f"sprite left the frame entirely at frame {t}")
            img[y0:y1, x0:x1] = cfg.sprite_level
            boxes[i] = BBox(x0, y0, x1, y1)
        frames[i] = np.clip(img, 0.0, 1.0)
    return LabeledVideo(
        video_id=video_id,
        frames=frames.astype(np.float32),
        label=label,
        gt_boxes=boxes,
        gt_segment=Segment(cfg.t_a, cfg.t_b),
        clamped=clamped,
    )


@dataclass
class Dataset:
    train: list[LabeledVideo]
    test: list[LabeledVideo]


def generate_dataset(cfg: SynthConfig, count_per_class: int, seed: int | None = None,
                     test_per_class: int | None = None) -> Dataset:
    """Balanced videos; the first ``count - test`` of each class train, the rest test."""
    if count_per_class < 2:
        raise UsageError("count_per_class must be >= 2")
    seed = cfg.seed if seed is None else seed
    if test_per_class is None:
        test_per_class = max(1, count_per_class // 4)
    if not 1 <= test_per_class < count_per_class:
        raise UsageError("test_per_class must leave at least one training video per class")
    train, test = [], []
    K = cfg.n_classes
    for j in range(count_per_class):
        for label in range(K):
            index = j * K + label
            vid = generate_video(cfg, label, derive_seed(seed, index), video_id=f"v{index:05d}")
            (train if j < count_per_class - test_per_class else test).append(vid)
    return Dataset(train, test)


# -------------------------------------------------------------------- STAV I/O

STAV_MAGIC = b"STAV"
STAV_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIII")


def write_video(path: str | Path, video: LabeledVideo) -> None:
    n, H, W = video.frames.shape
    seg = video.gt_segment
    boxes = np.full((n, 4), -1, dtype="<i4")
    for i, b in enumerate(video.gt_boxes):
        if b is not None:
            boxes[i] = (b.x_min, b.y_min, b.x_max, b.y_max)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STAV_MAGIC, STAV_VERSION, n, H, W, video.label, seg.t_start, seg.t_end))
        fh.write(np.ascontiguousarray(video.frames, dtype="<f4").tobytes())
        fh.write(boxes.tobytes())


def read_video(path: str | Path) -> LabeledVideo:
    path = Path(path)
    raw = path.read_bytes()
    magic, version, n, H, W, label, t_a, t_b = _HEADER.unpack_from(raw, 0)
    if magic != STAV_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != STAV_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    frames = np.frombuffer(raw, dtype="<f4", count=n * H * W, offset=off).reshape(n, H, W).astype(np.float32)
    off += 4 * n * H * W
    quads = np.frombuffer(raw, dtype="<i4", count=4 * n, offset=off).reshape(n, 4)
    boxes = [None if q[0] < 0 else BBox(*(int(v) for v in q)) for q in quads]
    return LabeledVideo(path.stem, frames, int(label), boxes, Segment(int(t_a), int(t_b)))


def write_dataset(root: str | Path, cfg: SynthConfig, data: Dataset) -> None:
    """``<split>/<id>.stav`` plus ``<split>_spatial_gt.csv`` / ``<split>_temporal_gt.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "synth.cfg").write_text(config_to_text(cfg))
    for split, videos in (("train", data.train), ("test", data.test)):
        d = root / split
        d.mkdir(exist_ok=True)
        spatial, temporal = [], []
        for v in videos:
            write_video(d / f"{v.video_id}.stav", v)
            sp, tp = v.ground_truth()
            spatial.extend(sp)
            temporal.append(tp)
        write_ground_truth(root / f"{split}_spatial_gt.csv", spatial)
        write_ground_truth(root / f"{split}_temporal_gt.csv", temporal)


def read_split(root: str | Path, split: str) -> list[LabeledVideo]:
    return [read_video(p) for p in sorted((Path(root) / split).glob("*.stav"))]


def read_dataset(root: str | Path) -> Dataset:
    return Dataset(read_split(root, "train"), read_split(root, "test"))


def stack_frames(videos: Sequence[LabeledVideo]) -> np.ndarray:
    return np.stack([v.frames for v in videos]).astype(np.float64)
