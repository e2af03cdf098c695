"""Planar polyline helpers and the BEV grid geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Window:
    """Axis-aligned metric extent in the ego frame (x forward, y left)."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"window extents must be positive: {self}")

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> bool:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return bool(
            np.all(pts[:, 0] >= self.x_min - tol)
            and np.all(pts[:, 0] <= self.x_max + tol)
            and np.all(pts[:, 1] >= self.y_min - tol)
            and np.all(pts[:, 1] <= self.y_max + tol)
        )

    def as_list(self) -> list[float]:
        return [self.x_min, self.x_max, self.y_min, self.y_max]


@dataclass(frozen=True)
class BevGrid:
    """Window rasterized into square cells; rows follow x, columns follow y."""

    window: Window
    cell: float = 0.5

    @property
    def H(self) -> int:
        return int(round((self.window.x_max - self.window.x_min) / self.cell))

    @property
    def W(self) -> int:
        return int(round((self.window.y_max - self.window.y_min) / self.cell))

    @classmethod
    def full(cls) -> "BevGrid":
        return cls(Window(-50.0, 50.0, -25.0, 25.0), 0.5)

    @classmethod
    def desk(cls) -> "BevGrid":
        return cls(Window(-16.0, 16.0, -8.0, 8.0), 0.5)

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        row = math.floor((x - self.window.x_min) / self.cell)
        col = math.floor((y - self.window.y_min) / self.cell)
        return min(max(row, 0), self.H - 1), min(max(col, 0), self.W - 1)

    def continuous(self, x: float, y: float) -> tuple[float, float]:
        """Grid coordinate in cells, with cell centers at integers."""
        return (x - self.window.x_min) / self.cell - 0.5, (y - self.window.y_min) / self.cell - 0.5

    def cell_centers(self) -> np.ndarray:
        """H x W x 2 array of metric cell-center coordinates."""
        xs = self.window.x_min + (np.arange(self.H) + 0.5) * self.cell
        ys = self.window.y_min + (np.arange(self.W) + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def rect_mask(self, rects) -> np.ndarray:
        """Cells whose center falls inside any [x0, y0, x1, y1] rectangle."""
        centers = self.cell_centers()
        mask = np.zeros((self.H, self.W), dtype=bool)
        for x0, y0, x1, y1 in rects:
            lo_x, hi_x = min(x0, x1), max(x0, x1)
            lo_y, hi_y = min(y0, y1), max(y0, y1)
            mask |= (
                (centers[..., 0] >= lo_x)
                & (centers[..., 0] <= hi_x)
                & (centers[..., 1] >= lo_y)
                & (centers[..., 1] <= hi_y)
            )
        return mask


def arc_lengths(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=float)
    return float(arc_lengths(pts)[-1]) if len(pts) > 1 else 0.0


def point_at(points: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    """Point at arc length ``s`` along a polyline with cumulative lengths ``cum``."""
    k = int(np.searchsorted(cum, s, side="right")) - 1
    k = min(max(k, 0), len(points) - 2)
    span = cum[k + 1] - cum[k]
    t = 0.0 if span == 0 else (s - cum[k]) / span
    return points[k] + t * (points[k + 1] - points[k])


def resample_polyline(points, n: int) -> np.ndarray:
    """``n`` points evenly spaced by arc length; endpoints kept exactly."""
    if n < 2:
        raise ValueError("resample_polyline needs n >= 2")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    cum = arc_lengths(pts) if len(pts) > 1 else np.zeros(1)
    total = cum[-1]
    if len(pts) < 2 or total <= 0:
        raise ValueError("cannot resample a zero-length polyline")
    out = np.empty((n, 2))
    out[0] = pts[0]
    out[-1] = pts[-1]
    for k in range(1, n - 1):
        out[k] = point_at(pts, cum, k * total / (n - 1))
    return out


def sub_polyline(points: np.ndarray, s0: float, s1: float) -> np.ndarray:
    """Portion of a polyline between arc lengths ``s0 < s1`` (original vertices kept)."""
    cum = arc_lengths(points)
    inner = [points[i] for i in range(len(points)) if s0 < cum[i] < s1]
    return np.array([point_at(points, cum, s0), *inner, point_at(points, cum, s1)])


def densify(points, spacing: float) -> np.ndarray:
    """Resample so consecutive points are at most ``spacing`` apart."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    length = polyline_length(pts)
    if len(pts) < 2 or length == 0:
        return pts[:1].copy()
    n = max(2, int(math.ceil(length / spacing)) + 1)
    return resample_polyline(pts, n)


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def clip_segment(p0: np.ndarray, p1: np.ndarray, window: Window) -> tuple[float, float] | None:
    """Parametric (Liang-Barsky) clip of p0->p1 to the closed window.

    Returns the surviving parameter interval ``(t0, t1)`` or None.
    """
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-d[0], p0[0] - window.x_min),
        (d[0], window.x_max - p0[0]),
        (-d[1], p0[1] - window.y_min),
        (d[1], window.y_max - p0[1]),
    ):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return t0, t1
