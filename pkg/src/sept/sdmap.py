"""Scene files, SD-map polylines in the ego frame, and GPS-style misalignment."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .geometry import BevGrid, Window, clip_segment, resample_polyline, rotation
from .metrics import LaneGraph
from .rng import SplitMix64

__all__ = [
    "Category",
    "Polyline",
    "LocalMap",
    "Scene",
    "SceneFormatError",
    "parse_scene",
    "serialize_scene",
    "crop_to_window",
    "resample_polyline",
    "perturb",
    "sample_rigid_offset",
]

_DUP_TOL = 1e-9


class SceneFormatError(ValueError):
    pass


class Category(str, Enum):
    ROAD = "road"
    CROSSWALK = "crosswalk"
    SIDEWALK = "sidewalk"

    @property
    def channel(self) -> int:
        return _CHANNELS[self]


_CHANNELS = {Category.ROAD: 0, Category.CROSSWALK: 1, Category.SIDEWALK: 2}


def _dedupe(points: np.ndarray) -> np.ndarray:
    keep = [0]
    for i in range(1, len(points)):
        if np.linalg.norm(points[i] - points[keep[-1]]) > _DUP_TOL:
            keep.append(i)
    return points[keep]


@dataclass
class Polyline:
    category: Category
    points: np.ndarray

    def __post_init__(self):
        self.category = Category(self.category)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(self.points) < 2:
            raise SceneFormatError("polyline needs at least 2 points")
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(steps <= _DUP_TOL):
            raise SceneFormatError("polyline has repeated consecutive points")


@dataclass
class LocalMap:
    polylines: list[Polyline]
    window: Window

    def __post_init__(self):
        for pl in self.polylines:
            if not self.window.contains(pl.points):
                raise SceneFormatError("polyline point outside declared window")

    def roads(self) -> list[Polyline]:
        return [p for p in self.polylines if p.category is Category.ROAD]


@dataclass
class Scene:
    id: str
    sd_map: LocalMap
    lane_graph: LaneGraph
    occlusion_rects: list[list[float]] = field(default_factory=list)
    keypoints: list[tuple[float, float]] | None = None

    def occlusion_mask(self, grid: BevGrid) -> np.ndarray:
        return grid.rect_mask(self.occlusion_rects)

    @property
    def window(self) -> Window:
        return self.sd_map.window


# -- parsing ----------------------------------------------------------------
def _require(obj: dict, key: str, where: str = "scene"):
    if key not in obj:
        raise SceneFormatError(f"missing required field '{key}' in {where}")
    return obj[key]


def _points(raw, where: str) -> np.ndarray:
    try:
        pts = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{where}: points must be [[x, y], ...]") from exc
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise SceneFormatError(f"{where}: points must be [[x, y], ...]")
    if len(pts) < 2:
        raise SceneFormatError(f"{where}: polyline needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        raise SceneFormatError(f"{where}: non-finite coordinate")
    return pts


def parse_scene(text: str) -> Scene:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneFormatError("scene document must be a JSON object")

    scene_id = str(_require(doc, "id"))
    raw_window = _require(doc, "window")
    if not isinstance(raw_window, list) or len(raw_window) != 4:
        raise SceneFormatError("window must be [x_min, x_max, y_min, y_max]")
    try:
        window = Window(*map(float, raw_window))
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from exc

    polylines = []
    for i, item in enumerate(_require(doc, "sd_polylines")):
        where = f"sd_polylines[{i}]"
        cat = _require(item, "category", where)
        if cat not in {c.value for c in Category}:
            raise SceneFormatError(f"{where}: unknown category {cat!r}")
        pts = _points(_require(item, "points", where), where)
        if not window.contains(pts):
            raise SceneFormatError(f"{where}: point outside declared window")
        polylines.append(Polyline(Category(cat), pts))

    ids, lines = [], []
    for i, lane in enumerate(_require(doc, "lanes")):
        where = f"lanes[{i}]"
        ids.append(int(_require(lane, "id", where)))
        pts = _points(_require(lane, "centerline", where), where)
        if not window.contains(pts):
            raise SceneFormatError(f"{where}: point outside declared window")
        lines.append(pts)
    adjacency = np.asarray(_require(doc, "adjacency"), dtype=np.int64)
    if len(ids) == 0:
        adjacency = adjacency.reshape(0, 0)
    if adjacency.shape != (len(ids), len(ids)):
        raise SceneFormatError(f"adjacency shape {adjacency.shape} does not match {len(ids)} lanes")
    try:
        graph = LaneGraph(ids, lines, adjacency)
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from exc

    rects = [list(map(float, r)) for r in doc.get("occlusion", {}).get("rects", [])]
    for r in rects:
        if len(r) != 4:
            raise SceneFormatError("occlusion rects must be [x0, y0, x1, y1]")
    keypoints = doc.get("keypoints")
    if keypoints is not None:
        keypoints = [(float(x), float(y)) for x, y in keypoints]
    return Scene(scene_id, LocalMap(polylines, window), graph, rects, keypoints)


def serialize_scene(scene: Scene) -> str:
    doc = {
        "id": scene.id,
        "window": scene.window.as_list(),
        "sd_polylines": [
            {"category": pl.category.value, "points": pl.points.tolist()} for pl in scene.sd_map.polylines
        ],
        "lanes": [
            {"id": lid, "centerline": np.asarray(line).tolist()}
            for lid, line in zip(scene.lane_graph.ids, scene.lane_graph.centerlines)
        ],
        "adjacency": scene.lane_graph.adjacency.tolist(),
        "occlusion": {"rects": scene.occlusion_rects},
    }
    if scene.keypoints is not None:
        doc["keypoints"] = [list(p) for p in scene.keypoints]
    return json.dumps(doc)


# -- ego-frame preparation ---------------------------------------------------
def to_ego(points: np.ndarray, pose: tuple[float, float, float]) -> np.ndarray:
    x, y, heading = pose
    if x == 0 and y == 0 and heading == 0:
        return np.array(points, dtype=float)
    return (np.asarray(points, dtype=float) - [x, y]) @ rotation(-heading).T


def _clip_points(points: np.ndarray, window: Window) -> list[np.ndarray]:
    """Split a polyline into the runs that survive clipping to ``window``."""
    runs: list[list[np.ndarray]] = []
    current: list[np.ndarray] = []
    for p0, p1 in zip(points[:-1], points[1:]):
        span = clip_segment(p0, p1, window)
        if span is None:
            if current:
                runs.append(current)
                current = []
            continue
        t0, t1 = span
        a = p0 if t0 == 0.0 else p0 + t0 * (p1 - p0)
        b = p1 if t1 == 1.0 else p0 + t1 * (p1 - p0)
        if current and t0 > 0.0:
            runs.append(current)
            current = []
        if not current:
            current = [a]
        current.append(b)
        if t1 < 1.0:
            runs.append(current)
            current = []
    if current:
        runs.append(current)
    out = []
    for run in runs:
        arr = _dedupe(np.clip(np.array(run), [window.x_min, window.y_min], [window.x_max, window.y_max]))
        if len(arr) >= 2:
            out.append(arr)
    return out


def crop_to_window(polylines: list[Polyline], pose: tuple[float, float, float], window: Window,
                   margin: float = 0.0) -> LocalMap:
    """Move polylines into the ego frame of ``pose`` and clip them to ``window``.

    A polyline that leaves and re-enters the window comes back as several pieces.
    ``margin`` enlarges the crop on every side (the default crops to the BEV window itself).
    """
    if margin < 0:
        raise ValueError(f"crop margin must be non-negative, got {margin}")
    if margin:
        window = Window(window.x_min - margin, window.x_max + margin, window.y_min - margin, window.y_max + margin)
    out = []
    for pl in polylines:
        for run in _clip_points(to_ego(pl.points, pose), window):
            out.append(Polyline(pl.category, run))
    return LocalMap(out, window)


# -- misalignment ------------------------------------------------------------
def sample_rigid_offset(seed: int, sigma_t: float, sigma_theta: float) -> tuple[float, float, float]:
    """(dx, dy, dtheta) drawn as independent zero-mean normals."""
    if sigma_t < 0 or sigma_theta < 0:
        raise ValueError("perturbation scales must be non-negative")
    gen = SplitMix64(seed)
    dx, dy, dth = gen.normal(), gen.normal(), gen.normal()
    return sigma_t * dx, sigma_t * dy, sigma_theta * dth


def perturb(local_map: LocalMap, seed: int, sigma_t: float, sigma_theta: float) -> LocalMap:
    """Apply one random rigid transform to the whole map, then re-clip."""
    dx, dy, dth = sample_rigid_offset(seed, sigma_t, sigma_theta)
    if dx == 0 and dy == 0 and dth == 0:
        return replace(local_map, polylines=[Polyline(p.category, p.points.copy()) for p in local_map.polylines])
    rot = rotation(dth)
    moved = [Polyline(p.category, p.points @ rot.T + [dx, dy]) for p in local_map.polylines]
    return crop_to_window(moved, (0.0, 0.0, 0.0), local_map.window)
