"""Localization scoring and distribution statistics.

Head centers are extracted from hard binary maps by connected-component
centroids, matched one-to-one against ground-truth points by an optimal
(not greedy) assignment restricted to a match radius, then scored with
precision/recall/F1. Separate helpers summarize confidence/threshold
value distributions at positive pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, UndefinedMetricError
from .scenegen import Scene
from .tensorcore import Tensor

A_MIN = 2  # single-pixel components are discarded as noise
_FORBIDDEN = 1e9


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]]  # (pred_idx, gt_idx, distance)


@dataclass
class DistributionStats:
    quartiles: tuple[float, float, float]
    mean: float
    min: float
    max: float
    n: int


def extract_centers(binary_hard: Tensor, a_min: int = A_MIN) -> list[tuple[float, float]]:
    """Centroids of 4-connected foreground components with area >= a_min."""
    arr = binary_hard.data
    if arr.ndim == 3:
        arr = arr[0]
    labels, n = ndimage.label(arr > 0.5)  # default structure is 4-connectivity
    if n == 0:
        return []
    areas = np.bincount(labels.ravel())
    rows, cols = np.nonzero(labels)
    ids = labels[rows, cols]
    sum_r = np.bincount(ids, weights=rows, minlength=n + 1)
    sum_c = np.bincount(ids, weights=cols, minlength=n + 1)
    centers = []
    for k in range(1, n + 1):
        if areas[k] >= a_min:
            centers.append((sum_r[k] / areas[k], sum_c[k] / areas[k]))
    return centers


def match_points(pred, gt, radius) -> MatchResult:
    """Minimum-cost one-to-one assignment of predictions to ground truth.

    Only pairs within the match radius are eligible (radius may be a scalar
    or one value per gt point). Among maximum-cardinality matchings the
    total distance is minimal; unmatched predictions count as FP, unmatched
    ground truth as FN.
    """
    pred = [(float(r), float(c)) for (r, c) in pred]
    gt = [(float(p[0]), float(p[1])) for p in gt]
    rad = np.broadcast_to(np.asarray(radius, dtype=np.float64), (len(gt),))
    if len(gt) and np.any(rad <= 0):
        raise ConfigError("match radius must be positive")
    if not pred or not gt:
        return MatchResult(tp=0, fp=len(pred), fn=len(gt), pairs=[])
    p = np.asarray(pred)
    g = np.asarray(gt)
    dist = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(axis=2))
    allowed = dist <= rad[None, :]
    cost = np.where(allowed, dist, _FORBIDDEN)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(i), int(j), float(dist[i, j]))
             for i, j in zip(rows, cols) if allowed[i, j]]
    pairs.sort(key=lambda t: (t[0], t[1]))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(pred) - tp, fn=len(gt) - tp, pairs=pairs)


def localization_metrics(match: MatchResult) -> tuple[float, float, float]:
    """(precision, recall, f1) with the zero-denominator conventions."""
    tp, fp, fn = match.tp, match.fp, match.fn
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = (2.0 * precision * recall / (precision + recall)
          if (precision + recall) > 0 else 0.0)
    return precision, recall, f1


def distribution_stats(values) -> DistributionStats:
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise UndefinedMetricError("distribution_stats of an empty collection")
    q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
    return DistributionStats(quartiles=(float(q1), float(med), float(q3)),
                             mean=float(vals.mean()), min=float(vals.min()),
                             max=float(vals.max()), n=int(vals.size))


def score_scene(binary_hard: Tensor, scene: Scene) -> MatchResult:
    """Match extracted centers against the scene's points at per-head radius."""
    centers = extract_centers(binary_hard)
    gt_pts = [(r, c) for (r, c, _) in scene.points]
    radii = [rad for (_, _, rad) in scene.points]
    return match_points(centers, gt_pts, radii if radii else 1.0)


def aggregate_matches(matches) -> MatchResult:
    """Micro-aggregation over scenes (pairs are not retained)."""
    tp = sum(m.tp for m in matches)
    fp = sum(m.fp for m in matches)
    fn = sum(m.fn for m in matches)
    return MatchResult(tp=tp, fp=fp, fn=fn, pairs=[])
