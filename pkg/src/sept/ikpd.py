"""Intersection keypoints: extraction from SD roads, Gaussian targets, head, focal loss."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import BevGrid
from .nn import Conv2d, Linear, Module
from .sdmap import LocalMap
from .tensor import Tensor, clip, global_avg_pool, log, relu, sigmoid

SNAP_EPS = 0.25


class KeypointKind(str, Enum):
    JUNCTION = "junction"
    CROSSING = "crossing"


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    kind: KeypointKind

    @property
    def position(self) -> tuple[float, float]:
        return self.x, self.y


def keypoints_to_json(points: list[Keypoint]) -> str:
    return json.dumps([{"x": k.x, "y": k.y, "kind": k.kind.value} for k in points])


def _clusters(points: np.ndarray, eps: float) -> np.ndarray:
    """Connected components of the 'within eps' relation (order independent)."""
    n = len(points)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if n:
        d = np.linalg.norm(points[:, None] - points[None, :], axis=-1)
        for i, j in zip(*np.nonzero(np.triu(d <= eps, k=1))):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    return np.array([find(i) for i in range(n)], dtype=int)


def _cluster_mean(points: np.ndarray) -> np.ndarray:
    order = np.lexsort((points[:, 1], points[:, 0]))
    return points[order].mean(axis=0)


def _split_on_touches(lines: list[np.ndarray], eps: float) -> list[np.ndarray]:
    """Insert a vertex wherever another road's vertex lies within eps of a segment interior."""
    out = []
    for a, line in enumerate(lines):
        others = [v for b, other in enumerate(lines) if b != a for v in other]
        others = np.array(others) if others else np.zeros((0, 2))
        pts = [line[0]]
        for p0, p1 in zip(line[:-1], line[1:]):
            d = p1 - p0
            length2 = float(d @ d)
            inserts = []
            for v in others:
                t = float((v - p0) @ d) / length2
                if not 0.0 < t < 1.0:
                    continue
                foot = p0 + t * d
                if np.linalg.norm(v - foot) <= eps and min(np.linalg.norm(foot - p0), np.linalg.norm(foot - p1)) > eps:
                    inserts.append((t, tuple(foot)))
            for _, foot in sorted(set(inserts)):
                pts.append(np.array(foot))
            pts.append(p1)
        out.append(np.array(pts))
    return out


def _proper_crossing(a0, a1, b0, b1, eps: float) -> np.ndarray | None:
    da, db = a1 - a0, b1 - b0
    denom = da[0] * db[1] - da[1] * db[0]
    if denom == 0:
        return None
    w = b0 - a0
    t = (w[0] * db[1] - w[1] * db[0]) / denom
    u = (w[0] * da[1] - w[1] * da[0]) / denom
    if not (0.0 < t < 1.0 and 0.0 < u < 1.0):
        return None
    hit = a0 + t * da
    if min(np.linalg.norm(hit - q) for q in (a0, a1, b0, b1)) <= eps:
        return None
    return hit


def extract_intersections(local_map: LocalMap, eps: float = SNAP_EPS) -> list[Keypoint]:
    """Junctions (snapped nodes of degree >= 3) and proper crossings of road polylines."""
    lines = _split_on_touches([p.points for p in local_map.roads()], eps)
    candidates: list[tuple[np.ndarray, KeypointKind]] = []

    if lines:
        verts = np.concatenate(lines)
        label = _clusters(verts, eps)
        neighbours: dict[int, set[int]] = {}
        start = 0
        for line in lines:
            ids = label[start : start + len(line)]
            for u, v in zip(ids[:-1], ids[1:]):
                if u != v:
                    neighbours.setdefault(u, set()).add(v)
                    neighbours.setdefault(v, set()).add(u)
            start += len(line)
        for node, nbrs in neighbours.items():
            if len(nbrs) >= 3:
                candidates.append((_cluster_mean(verts[label == node]), KeypointKind.JUNCTION))

    for i in range(len(lines)):
        for j in range(i + 1, len(lines)):
            for a0, a1 in zip(lines[i][:-1], lines[i][1:]):
                for b0, b1 in zip(lines[j][:-1], lines[j][1:]):
                    hit = _proper_crossing(a0, a1, b0, b1, eps)
                    if hit is not None:
                        candidates.append((hit, KeypointKind.CROSSING))

    if not candidates:
        return []
    pos = np.array([c[0] for c in candidates])
    kinds = [c[1] for c in candidates]
    label = _clusters(pos, eps)
    out = []
    for root in sorted(set(label)):
        members = np.nonzero(label == root)[0]
        kind = (
            KeypointKind.JUNCTION
            if any(kinds[m] is KeypointKind.JUNCTION for m in members)
            else KeypointKind.CROSSING
        )
        x, y = _cluster_mean(pos[members])
        out.append(Keypoint(float(x), float(y), kind))
    out.sort(key=lambda k: (k.x, k.y))
    return out


def render_heatmap(points, grid: BevGrid, sigma: float = 2.0, floor: float = 1e-4) -> np.ndarray:
    """H x W map of max-combined Gaussians (sigma in cells) around metric keypoints."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    heat = np.zeros((grid.H, grid.W))
    rows = np.arange(grid.H)[:, None]
    cols = np.arange(grid.W)[None, :]
    for p in points:
        x, y = p.position if isinstance(p, Keypoint) else p
        u, v = grid.continuous(x, y)
        heat = np.maximum(heat, np.exp(-((rows - u) ** 2 + (cols - v) ** 2) / (2.0 * sigma * sigma)))
    heat[heat < floor] = 0.0
    return heat


# -- head --------------------------------------------------------------------
class SqueezeExcite(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def scales(self, x: Tensor) -> Tensor:
        return sigmoid(self.fc2(relu(self.fc1(global_avg_pool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.scales(x)


class ResidualSeparableBlock(Module):
    def __init__(self, channels: int, dilation: int, rng: np.random.Generator):
        self.depthwise = Conv2d(channels, channels, 3, rng, dilation=dilation, depthwise=True)
        self.pointwise = Conv2d(channels, channels, 1, rng)
        self.se = SqueezeExcite(channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.pointwise(self.depthwise(x)))
        return x + self.se(y)


class IKPDHead(Module):
    def __init__(self, channels: int, rng: np.random.Generator, dilations=(1, 2)):
        self.blocks = [ResidualSeparableBlock(channels, d, rng) for d in dilations]
        self.out = Conv2d(channels, 1, 1, rng)

    def forward(self, f: Tensor) -> Tensor:
        for block in self.blocks:
            f = block(f)
        return sigmoid(self.out(f))


def focal_loss(pred: Tensor, target: np.ndarray, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced pixel focal loss against a Gaussian heatmap target."""
    y = np.asarray(target, dtype=float).reshape(pred.shape)
    p = clip(pred, 1e-7, 1.0 - 1e-7)
    pos = (y == 1.0).astype(float)
    neg_w = (1.0 - pos) * (1.0 - y) ** beta
    n = max(1.0, float(pos.sum()))
    pos_term = ((1.0 - p) ** alpha) * log(p) * pos
    neg_term = (p**alpha) * log(1.0 - p) * neg_w
    return (pos_term + neg_term).sum() * (-1.0 / n)
