"""Raster SD-map branch: supercover rasterization, conv encoder, FiLM alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BevGrid
from .nn import ConvStack, Linear, Module
from .sdmap import Category, LocalMap
from .tensor import ShapeError, Tensor, global_max_pool, relu

CHANNEL_NAMES = ("road", "crosswalk", "sidewalk")


@dataclass
class RasterTile:
    grid: np.ndarray  # H x W x 3, values in {0, 1}

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[2] != 3:
            raise ValueError(f"raster tile must be H x W x 3, got {self.grid.shape}")

    def to_tensor(self) -> Tensor:
        return Tensor(self.grid)

    def export_pgm(self, out_dir, stem: str) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for ch, name in enumerate(CHANNEL_NAMES):
            path = out_dir / f"{stem}_{name}.pgm"
            write_pgm(path, self.grid[..., ch])
            paths.append(path)
        return paths


def write_pgm(path, values: np.ndarray) -> None:
    """Binary P5 greymap; values in [0, 1] map linearly onto 0..255."""
    img = np.clip(np.rint(np.asarray(values, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 greymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(float) / maxval


def segment_cells(p0, p1, grid: BevGrid) -> tuple[np.ndarray, np.ndarray]:
    """Rows/cols of cells whose closed square meets the open segment p0->p1.

    A zero-length segment marks the cell containing the point.  Touching a
    square only at the segment's endpoints does not mark it.
    """
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    win, cell = grid.window, grid.cell
    d = p1 - p0
    if d[0] == 0 and d[1] == 0:
        r, c = grid.cell_index(*p0)
        return np.array([r]), np.array([c])
    r_lo = max(math.floor((min(p0[0], p1[0]) - win.x_min) / cell) - 1, 0)
    r_hi = min(math.floor((max(p0[0], p1[0]) - win.x_min) / cell) + 1, grid.H - 1)
    c_lo = max(math.floor((min(p0[1], p1[1]) - win.y_min) / cell) - 1, 0)
    c_hi = min(math.floor((max(p0[1], p1[1]) - win.y_min) / cell) + 1, grid.W - 1)
    if r_lo > r_hi or c_lo > c_hi:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    rows = np.arange(r_lo, r_hi + 1)
    cols = np.arange(c_lo, c_hi + 1)
    x0 = win.x_min + rows * cell
    y0 = win.y_min + cols * cell

    def slab(lo, hi, p, dp):
        if dp == 0:
            inside = (p >= lo) & (p <= hi)
            return np.where(inside, -np.inf, np.inf), np.where(inside, np.inf, -np.inf)
        ta, tb = (lo - p) / dp, (hi - p) / dp
        return np.minimum(ta, tb), np.maximum(ta, tb)

    ex, xx = slab(x0, x0 + cell, p0[0], d[0])
    ey, xy = slab(y0, y0 + cell, p0[1], d[1])
    t_in = np.maximum(ex[:, None], ey[None, :])
    t_out = np.minimum(xx[:, None], xy[None, :])
    hit = (t_in <= t_out) & (t_in < 1.0) & (t_out > 0.0)
    rr, cc = np.nonzero(hit)
    return rows[rr], cols[cc]


def rasterize_lines(lines, grid: BevGrid) -> np.ndarray:
    """H x W occupancy of the supercover of every segment in ``lines``."""
    out = np.zeros((grid.H, grid.W))
    for pts in lines:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if len(pts) == 1:
            r, c = segment_cells(pts[0], pts[0], grid)
            out[r, c] = 1.0
        for a, b in zip(pts[:-1], pts[1:]):
            r, c = segment_cells(a, b, grid)
            out[r, c] = 1.0
    return out


def rasterize(local_map: LocalMap, grid: BevGrid) -> RasterTile:
    tile = np.zeros((grid.H, grid.W, 3))
    for cat in Category:
        lines = [p.points for p in local_map.polylines if p.category is cat]
        tile[..., cat.channel] = rasterize_lines(lines, grid)
    return RasterTile(tile)


# -- learned parts -----------------------------------------------------------
class RasterEncoder(Module):
    def __init__(self, channels: int, rng: np.random.Generator, depth: int = 3):
        self.stack = ConvStack(3, channels, depth, rng)

    def forward(self, tile: Tensor) -> Tensor:
        return self.stack(tile)


@dataclass
class FilmParams:
    gamma: Tensor
    beta: Tensor


class FeatureTransform(Module):
    """Predict per-channel (gamma, beta) from the pooled SD/BEV feature difference.

    The output layer starts at zero, so a fresh module returns gamma = 1,
    beta = 0 for any input.
    """

    def __init__(self, channels: int, rng: np.random.Generator, share_projection: bool = False):
        self.channels = channels
        self.share_projection = share_projection
        self.proj_sd = Linear(channels, channels, rng)
        self.proj_bev = None if share_projection else Linear(channels, channels, rng)
        self.hidden = Linear(channels, channels, rng)
        self.head = Linear(channels, 2 * channels, rng, zero=True)

    def forward(self, f_sd_r: Tensor, f_b_v: Tensor) -> FilmParams:
        if f_sd_r.shape != f_b_v.shape:
            raise ShapeError(f"feature transform inputs differ: {f_sd_r.shape} vs {f_b_v.shape}")
        proj_bev = self.proj_sd if self.proj_bev is None else self.proj_bev
        delta = self.proj_sd(f_sd_r) - proj_bev(f_b_v)
        context = global_max_pool(delta)
        out = self.head(relu(self.hidden(context)))
        c = self.channels
        return FilmParams(gamma=out[:c] + 1.0, beta=out[c:])


def film_modulate(f_sd_r: Tensor, params: FilmParams) -> Tensor:
    if f_sd_r.shape[-1] != params.gamma.shape[-1]:
        raise ShapeError(f"channel mismatch: {f_sd_r.shape} vs gamma {params.gamma.shape}")
    return f_sd_r * params.gamma + params.beta


def identity_projection(module: Linear) -> None:
    """Force a square Linear to the identity map (used by tests and harness baselines)."""
    module.weight.data = np.eye(module.weight.shape[0])
    module.bias.data = np.zeros_like(module.bias.data)


__all__ = [
    "RasterTile",
    "FilmParams",
    "rasterize",
    "rasterize_lines",
    "segment_cells",
    "RasterEncoder",
    "FeatureTransform",
    "film_modulate",
    "write_pgm",
    "read_pgm",
]
