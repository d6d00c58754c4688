"""Independent reference implementations used by the unit and acceptance tests.

Everything here is written with plain loops and exact arithmetic where
possible, and shares no code with the package beyond its data types.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np

# ------------------------------------------------------------------ losses


def brute_tv(masks) -> float:
    total = 0.0
    for m in np.asarray(masks, dtype=np.float64):
        img = m[0]
        rows, cols = img.shape
        for j in range(rows):
            for k in range(cols):
                if j + 1 < rows:
                    total += abs(img[j + 1, k] - img[j, k])
                if k + 1 < cols:
                    total += abs(img[j, k + 1] - img[j, k])
    return total


def brute_contrast(masks) -> float:
    total = 0.0
    for v in np.asarray(masks, dtype=np.float64).ravel():
        b = 1.0 if v > 0.5 else 0.0
        total += -0.5 * v * b + 0.5 * v * (1.0 - b)
    return total


def brute_unimodal(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    n = len(w)
    total = 0.0
    for t in range(n):
        for i in range(1, n - 1):
            total += max(0.0, w[t][i - 1] * w[t][i + 1] - w[t][i] ** 2)
    return total


# --------------------------------------------------------------- sequences


def brute_unimodal_seq(a, tol: float = 0.0) -> bool:
    """Try every peak position m explicitly."""
    n = len(a)
    for m in range(n):
        up = all(a[i - 1] <= a[i] + tol for i in range(1, m + 1))
        down = all(a[i] >= a[i + 1] - tol for i in range(m, n - 1))
        if up and down:
            return True
    return False


def brute_log_concave(a) -> bool:
    return all(a[i] * a[i] >= a[i - 1] * a[i + 1] for i in range(1, len(a) - 1))


def random_sequences(rng: np.random.Generator, count: int, min_len: int = 3, max_len: int = 12):
    """Non-negative sequences drawn from a mixture of families, many with zeros.

    The families are uniform, exponential, log-normal, discretized
    log-concave bumps, and copies of those with entries zeroed at random or
    in runs, so that log-concave cases are common.
    """
    out = []
    for _ in range(count):
        n = int(rng.integers(min_len, max_len + 1))
        family = int(rng.integers(0, 4))
        if family == 0:
            a = rng.uniform(0.0, 1.0, n)
        elif family == 1:
            a = rng.exponential(1.0, n)
        elif family == 2:
            a = rng.lognormal(0.0, 1.0, n)
        else:
            centre = rng.uniform(0, n - 1)
            a = np.exp(-rng.uniform(0.05, 2.0) * (np.arange(n) - centre) ** 2) * rng.uniform(0.1, 10.0)
        zeros = int(rng.integers(0, 3))
        if zeros == 1:
            a = np.where(rng.uniform(size=n) < 0.3, 0.0, a)
        elif zeros == 2:
            start = int(rng.integers(0, n))
            a = a.copy()
            a[start : start + int(rng.integers(1, n))] = 0.0
        out.append(a)
    return out


# --------------------------------------------------------------------- mAP


def _ap_exact(tp_flags, n_gt: int) -> Fraction:
    """All-points interpolated AP in exact rational arithmetic."""
    if n_gt == 0:
        return Fraction(0)
    tp = fp = 0
    prec, rec = [], []
    for flag in tp_flags:
        tp += flag
        fp += not flag
        prec.append(Fraction(tp, tp + fp))
        rec.append(Fraction(tp, n_gt))
    mrec = [Fraction(0)] + rec + [Fraction(1)]
    mpre = [Fraction(0)] + prec + [Fraction(0)]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return sum(((mrec[i + 1] - mrec[i]) * mpre[i + 1] for i in range(len(mrec) - 1)), Fraction(0))


def _greedy_consistent(order, assign, iou, alpha) -> bool:
    """``assign[d]`` is the GT index of detection d or None.

    Consistent with score-ordered greedy matching: every detection takes the
    best still-free eligible GT (lowest index on ties), or none if none is left.
    """
    taken = set()
    for d in order:
        free = [g for g in range(len(iou[d])) if g not in taken and iou[d][g] >= alpha]
        if not free:
            if assign[d] is not None:
                return False
            continue
        best = max(iou[d][g] for g in free)
        want = min(g for g in free if iou[d][g] == best)
        if assign[d] != want:
            return False
        taken.add(want)
    return True


def exhaustive_ap(scores, iou, n_gt: int, alpha: float) -> Fraction:
    """Enumerate every injective partial matching, keep the greedy-consistent one.

    ``iou[d][g]`` holds overlaps already restricted to compatible pairs
    (same video and frame), with -1 for incompatible ones.
    """
    n_det = len(scores)
    # stable descending order, ties by input position
    order = sorted(range(n_det), key=lambda d: -scores[d])
    found = None
    for assign in itertools.product([None, *range(n_gt)], repeat=n_det):
        used = [g for g in assign if g is not None]
        if len(used) != len(set(used)):
            continue
        if _greedy_consistent(order, assign, iou, alpha):
            if found is not None:
                raise AssertionError("more than one greedy-consistent matching")
            found = assign
    if found is None:
        raise AssertionError("no greedy-consistent matching")
    return _ap_exact([found[d] is not None for d in order], n_gt)


def exhaustive_map(dets, gts, alpha: float, region_iou) -> float:
    """Mean over GT classes of the exhaustive per-class AP."""
    aps = []
    for cls in sorted({g.class_id for g in gts}):
        cg = [g for g in gts if g.class_id == cls]
        cd = [d for d in dets if d.class_id == cls]
        iou = [
            [
                region_iou(d.region, g.region) if (d.video_id, d.frame) == (g.video_id, g.frame) else -1.0
                for g in cg
            ]
            for d in cd
        ]
        aps.append(exhaustive_ap([d.score for d in cd], iou, len(cg), alpha))
    return float(sum(aps, Fraction(0)) / len(aps))


def random_map_instance(rng: np.random.Generator, spatial: bool):
    """At most 3 detections and 2 ground truths per class, on coarse grids so IoU ties occur."""
    from stattn.localization import BBox, Detection, GroundTruth, Segment

    def region():
        if spatial:
            x, y = (int(v) for v in rng.integers(0, 4, 2))
            w, h = (int(v) for v in rng.integers(1, 4, 2))
            return BBox(x, y, x + w, y + h)
        s = int(rng.integers(1, 6))
        return Segment(s, s + int(rng.integers(0, 4)))

    def where():
        vid = f"v{int(rng.integers(0, 2))}"
        return vid, (int(rng.integers(1, 3)) if spatial else None)

    gts, dets = [], []
    for cls in range(int(rng.integers(1, 3))):
        for _ in range(int(rng.integers(1, 3))):
            vid, frame = where()
            gts.append(GroundTruth(vid, cls, region(), frame))
        for _ in range(int(rng.integers(0, 4))):
            own = [g for g in gts if g.class_id == cls]
            if rng.uniform() < 0.6:
                g = own[int(rng.integers(0, len(own)))]
                vid, frame = g.video_id, g.frame
            else:
                vid, frame = where()
            score = float(rng.choice([0.2, 0.5, 0.5, 0.9, rng.uniform()]))
            dets.append(Detection(vid, cls, region(), score, frame))
    # detections of a class without ground truth are ignored by the metric but still exercised
    if rng.uniform() < 0.2:
        vid, frame = where()
        dets.append(Detection(vid, 7, region(), 0.4, frame))
    rng.shuffle(dets)
    return dets, gts
