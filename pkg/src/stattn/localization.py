"""Weakly supervised localization from attention outputs and its scoring.

Boxes are half-open pixel ranges [x_min, x_max) x [y_min, y_max) with x
the column index.  Segments are inclusive 1-based frame ranges.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import UsageError

SPATIAL_ALPHAS = (0.05, 0.1, 0.2, 0.3)
TEMPORAL_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5)
REPORT_ALPHAS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise UsageError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Segment:
    t_start: int
    t_end: int

    def __post_init__(self):
        if self.t_start > self.t_end:
            raise UsageError(f"segment ends before it starts: {self}")

    @property
    def length(self) -> int:
        return self.t_end - self.t_start + 1


@dataclass(frozen=True)
class Detection:
    video_id: str
    class_id: int
    region: BBox | Segment
    score: float = 1.0
    frame: int | None = None  # set for per-frame spatial detections

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise UsageError(f"detection score must be finite, got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    video_id: str
    class_id: int
    region: BBox | Segment
    frame: int | None = None


# ------------------------------------------------------------- spatial

def upsample_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize (align_corners=False) of a (H, W) or (1, H, W) mask."""
    m = np.asarray(mask, dtype=np.float64)
    squeeze = m.ndim == 3
    if squeeze:
        m = m[0]
    h, w = m.shape
    if height < h or width < w:
        raise UsageError(f"upsample target {height}x{width} is smaller than mask {h}x{w}")

    def axis_weights(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, None)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, rl = axis_weights(h, height)
    c0, c1, cl = axis_weights(w, width)
    rows = m[r0] * (1.0 - rl)[:, None] + m[r1] * rl[:, None]
    out = rows[:, c0] * (1.0 - cl)[None, :] + rows[:, c1] * cl[None, :]
    return out[None] if squeeze else out


def mask_to_bbox(mask: np.ndarray, threshold: float = 0.5) -> BBox | None:
    """Tightest box around every pixel strictly above ``threshold``."""
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    rows, cols = np.nonzero(m > threshold)
    if rows.size == 0:
        return None
    return BBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def box_score(mask: np.ndarray, box: BBox) -> float:
    m = np.asarray(mask)
    if m.ndim == 3:
        m = m[0]
    return float(m[box.y_min : box.y_max, box.x_min : box.x_max].mean())


def box_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# ------------------------------------------------------------ temporal

def frame_importance(attention: np.ndarray) -> np.ndarray:
    """Column mean of an (n, n) attention matrix: weight of each frame averaged over steps."""
    return np.asarray(attention, dtype=np.float64).mean(axis=0)


def temporal_segments(w_frame: Sequence[float], threshold: float = 0.5) -> list[tuple[Segment, float]]:
    """Maximal runs whose max-normalized weight exceeds ``threshold``, scored by mean raw weight."""
    w = np.asarray(w_frame, dtype=np.float64)
    if (w < 0).any():
        raise UsageError("frame weights must be non-negative")
    top = w.max()
    if top <= 0:
        raise UsageError("frame weights are all zero")
    active = (w / top) > threshold
    out = []
    i = 0
    n = w.size
    while i < n:
        if not active[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and active[j + 1]:
            j += 1
        out.append((Segment(i + 1, j + 1), float(w[i : j + 1].mean())))
        i = j + 1
    return out


def interval_iou(a: Segment, b: Segment) -> float:
    inter = min(a.t_end, b.t_end) - max(a.t_start, b.t_start) + 1
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def region_iou(a: BBox | Segment, b: BBox | Segment) -> float:
    if isinstance(a, BBox) and isinstance(b, BBox):
        return box_iou(a, b)
    if isinstance(a, Segment) and isinstance(b, Segment):
        return interval_iou(a, b)
    raise UsageError(f"cannot compare {type(a).__name__} with {type(b).__name__}")


# ------------------------------------------------------------------ mAP

def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated AP for detections already sorted by score."""
    if n_gt <= 0:
        raise UsageError("average precision needs at least one ground truth")
    hits = np.asarray(tp, dtype=np.float64)
    if hits.size == 0:
        return 0.0
    ctp = np.cumsum(hits)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, hits.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def greedy_match(dets: Sequence[Detection], gts: Sequence[GroundTruth], alpha: float) -> list[bool]:
    """Score-ordered greedy matching; returns the TP flag of each detection in score order.

    Each detection takes the unmatched ground truth of the same video (and
    frame) with the highest IoU >= alpha; ties go to the lower GT index.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)
    by_key: dict[tuple, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_key[(g.video_id, g.frame)].append(j)
    used = [False] * len(gts)
    flags = []
    for k in order:
        d = dets[k]
        best, best_iou = -1, -1.0
        for j in by_key.get((d.video_id, d.frame), ()):
            if used[j]:
                continue
            iou = region_iou(d.region, gts[j].region)
            if iou >= alpha and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def map_at_iou(dets: Iterable[Detection], gts: Iterable[GroundTruth], alpha: float) -> float:
    """Mean over classes with ground truth of all-points AP at IoU threshold ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise UsageError(f"IoU threshold must lie in (0, 1), got {alpha}")
    gts = list(gts)
    if not gts:
        raise UsageError("empty ground-truth set")
    dets = list(dets)
    aps = []
    for cls in sorted({g.class_id for g in gts}):
        cls_gts = [g for g in gts if g.class_id == cls]
        cls_dets = [d for d in dets if d.class_id == cls]
        aps.append(average_precision(greedy_match(cls_dets, cls_gts, alpha), len(cls_gts)))
    return float(np.mean(aps))


def map_table(dets: Sequence[Detection], gts: Sequence[GroundTruth],
              alphas: Sequence[float] = REPORT_ALPHAS) -> dict[float, float]:
    return {a: map_at_iou(dets, gts, a) for a in alphas}


# ------------------------------------------------------------------- I/O

SPATIAL_COLUMNS = ["video_id", "frame", "class", "x_min", "y_min", "x_max", "y_max"]
TEMPORAL_COLUMNS = ["video_id", "class", "t_start", "t_end"]


def write_ground_truth(path: str | Path, gts: Sequence[GroundTruth]) -> None:
    _write_rows(path, gts, with_score=False)


def write_detections(path: str | Path, dets: Sequence[Detection]) -> None:
    _write_rows(path, dets, with_score=True)


def _write_rows(path, items, with_score: bool) -> None:
    items = list(items)
    spatial = bool(items) and isinstance(items[0].region, BBox)
    header = list(SPATIAL_COLUMNS if spatial else TEMPORAL_COLUMNS)
    if with_score:
        header.append("score")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for it in items:
            r = it.region
            if spatial:
                row = [it.video_id, it.frame, it.class_id, r.x_min, r.y_min, r.x_max, r.y_max]
            else:
                row = [it.video_id, it.class_id, r.t_start, r.t_end]
            if with_score:
                row.append(repr(float(it.score)))
            out.writerow(row)


def read_ground_truth(path: str | Path) -> list[GroundTruth]:
    return [GroundTruth(d.video_id, d.class_id, d.region, d.frame) for d in _read_rows(path)]


def read_detections(path: str | Path) -> list[Detection]:
    return _read_rows(path)


def _read_rows(path) -> list[Detection]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            if "x_min" in row:
                region = BBox(int(row["x_min"]), int(row["y_min"]), int(row["x_max"]), int(row["y_max"]))
                frame = int(row["frame"])
            else:
                region = Segment(int(row["t_start"]), int(row["t_end"]))
                frame = None
            score = float(row["score"]) if row.get("score") not in (None, "") else 1.0
            out.append(Detection(row["video_id"], int(row["class"]), region, score, frame))
    return out


def write_map_table(path: str | Path, table: dict[float, float]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["alpha", "map"])
        for a in sorted(table):
            out.writerow([a, repr(float(table[a]))])
