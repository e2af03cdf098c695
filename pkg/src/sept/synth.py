"""Synthetic road scenes and the observation encoder that stands in for camera input."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BevGrid, Window
from .ikpd import extract_intersections
from .metrics import LaneGraph
from .nn import ConvStack, Module
from .raster import rasterize_lines
from .rng import derive_seed
from .sdmap import Category, LocalMap, Polyline, Scene, _clip_points, perturb
from .tensor import Tensor

LANE_OFFSET = 1.75


@dataclass
class SynthParams:
    seed: int = 0
    n_roads: int = 3
    grid_spacing: float = 12.0
    occlusion_fraction: float = 0.3
    drop_sd_edge_prob: float = 0.1
    sigma_t: float = 0.0
    sigma_theta: float = 0.0
    angle_jitter: float = 0.15
    crosswalk_prob: float = 0.5
    sidewalk_prob: float = 0.3

    def __post_init__(self):
        if self.n_roads < 1:
            raise ValueError("n_roads must be >= 1")
        for name in ("occlusion_fraction", "drop_sd_edge_prob", "crosswalk_prob", "sidewalk_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class _Road:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_min: float
    t_max: float

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction

    @property
    def normal(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])


def _span_in_window(origin, direction, window: Window) -> tuple[float, float] | None:
    lo, hi = -math.inf, math.inf
    for axis, (a, b) in enumerate(((window.x_min, window.x_max), (window.y_min, window.y_max))):
        if abs(direction[axis]) < 1e-12:
            if not a <= origin[axis] <= b:
                return None
            continue
        t1, t2 = (a - origin[axis]) / direction[axis], (b - origin[axis]) / direction[axis]
        lo, hi = max(lo, min(t1, t2)), min(hi, max(t1, t2))
    return (lo, hi) if hi - lo > 1.0 else None


def _layout_roads(params: SynthParams, window: Window, rng: np.random.Generator) -> list[_Road]:
    """Jittered grid: roads alternate between the two axes at grid_spacing offsets."""
    roads: list[_Road] = []
    centre = np.array([(window.x_min + window.x_max) / 2, (window.y_min + window.y_max) / 2])
    first_axis = int(rng.integers(2))
    for k in range(params.n_roads * 4):
        if len(roads) == params.n_roads:
            break
        axis = (first_axis + len(roads)) % 2  # 0: runs along x, 1: runs along y
        angle = (0.0 if axis == 0 else math.pi / 2) + rng.uniform(-params.angle_jitter, params.angle_jitter)
        direction = np.array([math.cos(angle), math.sin(angle)])
        same = sum(1 for r in roads if abs(r.direction[0]) > 0.7) if axis == 0 else sum(
            1 for r in roads if abs(r.direction[0]) <= 0.7
        )
        slot = (same + 1) // 2 * (1 if same % 2 else -1)
        offset = slot * params.grid_spacing + rng.uniform(-0.25, 0.25) * params.grid_spacing
        normal = np.array([-direction[1], direction[0]])
        origin = centre + offset * normal
        span = _span_in_window(origin, direction, window)
        if span is None:
            continue
        roads.append(_Road(origin, direction, *span))
    return roads


def _crossing_params(a: _Road, b: _Road) -> tuple[float, float] | None:
    m = np.column_stack([a.direction, -b.direction])
    if abs(np.linalg.det(m)) < 1e-9:
        return None
    t, u = np.linalg.solve(m, b.origin - a.origin)
    if a.t_min < t < a.t_max and b.t_min < u < b.t_max:
        return float(t), float(u)
    return None


def _occlusion_rects(fraction: float, grid: BevGrid, rng: np.random.Generator) -> list[list[float]]:
    win, cell = grid.window, grid.cell
    if fraction <= 0:
        return []
    if fraction >= 1:
        return [[win.x_min, win.y_min, win.x_max, win.y_max]]
    total = grid.H * grid.W
    mask = np.zeros((grid.H, grid.W), dtype=bool)
    rects = []
    while mask.sum() < fraction * total:
        deficit = fraction * total - mask.sum()
        hr = int(rng.integers(6, 17))
        wc = int(rng.integers(6, 17))
        while hr * wc > max(1.2 * deficit, 4) and (hr > 2 or wc > 2):
            if hr >= wc:
                hr -= 1
            else:
                wc -= 1
        r0 = int(rng.integers(0, grid.H - hr + 1))
        c0 = int(rng.integers(0, grid.W - wc + 1))
        mask[r0 : r0 + hr, c0 : c0 + wc] = True
        rects.append([
            win.x_min + r0 * cell,
            win.y_min + c0 * cell,
            win.x_min + (r0 + hr) * cell,
            win.y_min + (c0 + wc) * cell,
        ])
    return rects


def generate_scene(params: SynthParams, grid: BevGrid | None = None, scene_id: str | None = None) -> Scene:
    grid = grid or BevGrid.desk()
    window = grid.window
    rng = np.random.default_rng(params.seed)
    roads = _layout_roads(params, window, rng)

    # cut every road at its crossings; nodes are shared crossing ids
    cuts: list[list[tuple[float, int | None]]] = [[(r.t_min, None), (r.t_max, None)] for r in roads]
    node_pos: list[np.ndarray] = []
    for i in range(len(roads)):
        for j in range(i + 1, len(roads)):
            hit = _crossing_params(roads[i], roads[j])
            if hit is None:
                continue
            nid = len(node_pos)
            node_pos.append(roads[i].at(hit[0]))
            cuts[i].append((hit[0], nid))
            cuts[j].append((hit[1], nid))

    pieces = []  # (road index, t0, t1, start node, end node)
    for i, road in enumerate(roads):
        stops = sorted(cuts[i], key=lambda c: c[0])
        for (t0, n0), (t1, n1) in zip(stops[:-1], stops[1:]):
            if t1 - t0 > 1e-6:
                pieces.append((i, t0, t1, n0, n1))

    skeleton = [Polyline(Category.ROAD, np.array([roads[i].at(t0), roads[i].at(t1)])) for i, t0, t1, _, _ in pieces]
    skeleton = [Polyline(p.category, np.clip(p.points, [window.x_min, window.y_min], [window.x_max, window.y_max]))
                for p in skeleton]

    lanes: list[np.ndarray] = []
    lane_nodes: list[tuple[int | None, int | None, int]] = []  # (start, end, piece)
    for k, (i, t0, t1, n0, n1) in enumerate(pieces):
        road = roads[i]
        for sign, start, end in ((-1.0, n0, n1), (1.0, n1, n0)):
            a = road.at(t0) + sign * LANE_OFFSET * road.normal
            b = road.at(t1) + sign * LANE_OFFSET * road.normal
            pts = np.array([a, b]) if sign < 0 else np.array([b, a])
            runs = _clip_points(pts, window)
            if not runs:
                continue
            run = runs[0]
            s_node = start if np.allclose(run[0], pts[0]) else None
            e_node = end if np.allclose(run[-1], pts[-1]) else None
            lanes.append(run)
            lane_nodes.append((s_node, e_node, k))
    n = len(lanes)
    adjacency = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(n):
            end_a, start_b = lane_nodes[a][1], lane_nodes[b][0]
            if a != b and end_a is not None and end_a == start_b and lane_nodes[a][2] != lane_nodes[b][2]:
                adjacency[a, b] = 1
    graph = LaneGraph(list(range(n)), lanes, adjacency)

    keypoints = [k.position for k in extract_intersections(LocalMap(skeleton, window))]

    kept = [p for p in skeleton if rng.uniform() >= params.drop_sd_edge_prob]
    extras: list[Polyline] = []
    for k, (i, t0, t1, n0, n1) in enumerate(pieces):
        road = roads[i]
        for t_node, node, inward in ((t0, n0, 1.0), (t1, n1, -1.0)):
            if node is None or rng.uniform() >= params.crosswalk_prob:
                continue
            c = road.at(t_node + inward * 4.0)
            extras.append(Polyline(Category.CROSSWALK, np.array([c - 3.5 * road.normal, c + 3.5 * road.normal])))
        if rng.uniform() < params.sidewalk_prob:
            for sign in (-1.0, 1.0):
                off = sign * 4.5 * road.normal
                extras.append(Polyline(Category.SIDEWALK, np.array([road.at(t0) + off, road.at(t1) + off])))
    clipped = []
    for pl in extras:
        clipped.extend(Polyline(pl.category, run) for run in _clip_points(pl.points, window))
    sd_map = LocalMap(kept + clipped, window)
    if params.sigma_t > 0 or params.sigma_theta > 0:
        sd_map = perturb(sd_map, derive_seed("perturb", params.seed), params.sigma_t, params.sigma_theta)

    rects = _occlusion_rects(params.occlusion_fraction, grid, rng)
    return Scene(scene_id or f"scene_{params.seed:06d}", sd_map, graph, rects, keypoints)


def centerline_raster(scene: Scene, grid: BevGrid) -> np.ndarray:
    return rasterize_lines(scene.lane_graph.centerlines, grid)


def render_observation(scene: Scene, grid: BevGrid, noise_p: float = 0.02, seed: int | None = None) -> np.ndarray:
    """H x W x 2: noisy visible centerlines, and the occlusion mask."""
    occ = scene.occlusion_mask(grid)
    visible = centerline_raster(scene, grid) * (~occ)
    if noise_p > 0:
        rng = np.random.default_rng(derive_seed("observation", scene.id) if seed is None else seed)
        flip = rng.uniform(size=visible.shape) < noise_p
        salt = rng.uniform(size=visible.shape) < 0.5
        visible = np.where(flip, salt.astype(float), visible)
    return np.stack([visible, occ.astype(float)], axis=-1)


class ObsEncoder(Module):
    def __init__(self, channels: int, rng: np.random.Generator, depth: int = 3):
        self.stack = ConvStack(2, channels, depth, rng)

    def forward(self, obs: Tensor) -> Tensor:
        return self.stack(obs)
