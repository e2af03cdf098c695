"""Lane-graph and heatmap evaluation metrics.

All scores are percentages in [0, 100].  Topology sub-scores enter the
OLS / OLUS aggregates through a square root taken on the 0-1 fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import densify

Distance = Callable[[np.ndarray, np.ndarray], float]


@dataclass
class LaneGraph:
    """Lane centerlines plus a directed 0/1 successor matrix."""

    ids: list[int]
    centerlines: list[np.ndarray]
    adjacency: np.ndarray

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.int64).reshape(len(self.ids), len(self.ids))
        if len(self.ids) != len(self.centerlines):
            raise ValueError("lane ids and centerlines differ in length")
        if np.any((self.adjacency != 0) & (self.adjacency != 1)):
            raise ValueError("adjacency must be 0/1 valued")
        if np.any(np.diag(self.adjacency) != 0):
            raise ValueError("adjacency must have a zero diagonal")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MetricsReport:
    det_l: float | None = None
    det_t: float | None = None
    top_ll: float | None = None
    top_lt: float | None = None
    det_ls: float | None = None
    det_a: float | None = None
    det_te: float | None = None
    top_lsls: float | None = None
    top_lste: float | None = None
    ols: float | None = None
    olus: float | None = None
    thresholds: dict[str, list[float]] = field(default_factory=dict)

    def finalize(self) -> "MetricsReport":
        """Fill the aggregates whose sub-metrics are all present."""
        ols_parts = (self.det_l, self.det_t, self.top_ll, self.top_lt)
        olus_parts = (self.det_ls, self.det_a, self.det_te, self.top_lsls, self.top_lste)
        self.ols = ols(*ols_parts) if None not in ols_parts else None
        self.olus = olus(*olus_parts) if None not in olus_parts else None
        return self


# -- distances ---------------------------------------------------------------
def frechet_distance(a, b) -> float:
    """Discrete Frechet distance between two point sequences."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    n, m = d.shape
    ca = np.empty((n, m))
    ca[0, 0] = d[0, 0]
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], d[0, j])
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], d[i, 0])
        for j in range(1, m):
            ca[i, j] = max(min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1]), d[i, j])
    return float(ca[-1, -1])


def chamfer_distance(a, b, spacing: float = 0.5) -> float:
    """Symmetric mean nearest-point distance after densifying both inputs."""
    pa = densify(a, spacing)
    pb = densify(b, spacing)
    d = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


# -- average precision -------------------------------------------------------
def average_precision(tp: Sequence[bool], n_positive: int) -> float:
    """All-points interpolated AP of a ranked TP/FP list, as a fraction."""
    if n_positive == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    flags = np.asarray(tp, dtype=float)
    ctp = np.cumsum(flags)
    recall = ctp / n_positive
    precision = ctp / np.arange(1, len(flags) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def greedy_match(
    preds: Sequence[tuple[np.ndarray, float]],
    gts: Sequence[np.ndarray],
    threshold: float,
    distance: Distance,
) -> tuple[list[bool], dict[int, int]]:
    """Score-descending one-to-one matching; returns ranked TP flags and pred->gt map."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    taken: set[int] = set()
    flags: list[bool] = []
    match: dict[int, int] = {}
    for i in order:
        best, best_d = None, math.inf
        for j, gt in enumerate(gts):
            if j in taken:
                continue
            dist = distance(preds[i][0], gt)
            if dist <= threshold and dist < best_d:
                best, best_d = j, dist
        if best is None:
            flags.append(False)
        else:
            taken.add(best)
            match[i] = best
            flags.append(True)
    return flags, match


def detection_map(
    preds: Sequence[tuple[np.ndarray, float]],
    gts: Sequence[np.ndarray],
    thresholds: Sequence[float] = (1.0, 2.0, 3.0),
    distance: Distance = frechet_distance,
) -> float:
    aps = []
    for thr in thresholds:
        flags, _ = greedy_match(preds, gts, thr, distance)
        aps.append(average_precision(flags, len(gts)))
    return 100.0 * float(np.mean(aps))


def top_score(match: Mapping[int, int], pred_adj, gt_adj) -> float:
    """Edge AP over predicted edges (score > 0) given a fixed injective matching.

    An edge i->j is a true positive iff both endpoints are matched and the
    matched GT lanes are connected.  Recall counts GT edges between matched
    GT lanes only.
    """
    pred_adj = np.asarray(pred_adj, dtype=float)
    gt_adj = np.asarray(gt_adj)
    if len(set(match.values())) != len(match):
        raise ValueError("matching must be injective")
    edges = [
        (pred_adj[i, j], i, j)
        for i in range(pred_adj.shape[0])
        for j in range(pred_adj.shape[1])
        if i != j and pred_adj[i, j] > 0
    ]
    edges.sort(key=lambda e: -e[0])
    flags = [i in match and j in match and gt_adj[match[i], match[j]] == 1 for _, i, j in edges]
    hit = sorted(set(match.values()))
    n_gt = int(sum(gt_adj[a, b] for a in hit for b in hit if a != b))
    return 100.0 * average_precision(flags, n_gt)


# -- aggregates --------------------------------------------------------------
def _check_pct(**values: float) -> None:
    for name, v in values.items():
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"{name}={v} outside [0, 100]")


def _sqrt_pct(v: float) -> float:
    return 100.0 * math.sqrt(v / 100.0)


def ols(det_l: float, det_t: float, top_ll: float, top_lt: float) -> float:
    _check_pct(det_l=det_l, det_t=det_t, top_ll=top_ll, top_lt=top_lt)
    return 0.25 * (det_l + det_t + _sqrt_pct(top_ll) + _sqrt_pct(top_lt))


def olus(det_ls: float, det_a: float, det_te: float, top_lsls: float, top_lste: float) -> float:
    _check_pct(det_ls=det_ls, det_a=det_a, det_te=det_te, top_lsls=top_lsls, top_lste=top_lste)
    return (det_ls + det_a + det_te + _sqrt_pct(top_lsls) + _sqrt_pct(top_lste)) / 5.0


# -- heatmaps ----------------------------------------------------------------
def local_peaks(heat: np.ndarray) -> list[tuple[float, int, int]]:
    """Positive 3x3 local maxima as (value, row, col), highest first.

    On plateaus only the first cell in row-major order counts as a peak.
    """
    h, w = heat.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = heat
    is_peak = heat > 0
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
            earlier = di < 0 or (di == 0 and dj < 0)
            is_peak &= heat > nb if earlier else heat >= nb
    rows, cols = np.nonzero(is_peak)
    peaks = [(float(heat[r, c]), int(r), int(c)) for r, c in zip(rows, cols)]
    peaks.sort(key=lambda p: (-p[0], p[1], p[2]))
    return peaks


def heatmap_ap(pred: np.ndarray, gt_points: Sequence[tuple[float, float]], radius: float = 2.0) -> float:
    """AP of heatmap peaks against keypoints given in continuous grid coordinates."""
    if radius < 1:
        raise ValueError("radius must be >= 1 cell")
    heat = np.asarray(pred, dtype=float).reshape(pred.shape[0], pred.shape[1])
    gts = np.asarray(gt_points, dtype=float).reshape(-1, 2)
    claimed = np.zeros(len(gts), dtype=bool)
    flags = []
    for _, r, c in local_peaks(heat):
        if len(gts):
            d = np.hypot(gts[:, 0] - r, gts[:, 1] - c)
            d[claimed] = np.inf
            k = int(np.argmin(d))
            if d[k] <= radius:
                claimed[k] = True
                flags.append(True)
                continue
        flags.append(False)
    return 100.0 * average_precision(flags, len(gts))


def occupancy_iou(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    """IoU (percent) of ``pred >= threshold`` against a binary target."""
    p = np.asarray(pred) >= threshold
    t = np.asarray(target) > 0.5
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 100.0
    return 100.0 * float(np.logical_and(p, t).sum()) / float(union)
