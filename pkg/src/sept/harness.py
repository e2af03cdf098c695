"""Dataset generation, preprocessing, training, evaluation and the ablation matrix."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BevGrid
from .ikpd import extract_intersections, focal_loss, keypoints_to_json, render_heatmap
from .metrics import heatmap_ap, occupancy_iou
from .model import RunConfig, SeptModel, build_model
from .raster import rasterize, write_pgm
from .rng import derive_seed
from .sdmap import Scene, parse_scene, perturb, serialize_scene
from .synth import SynthParams, centerline_raster, generate_scene, render_observation
from .tensor import Tensor, backward, clip, load_checkpoint, log, no_grad, save_checkpoint
from .vector import SegmentTokens, tokenize

log_ = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


# -- dataset -----------------------------------------------------------------
def scene_seed(base_seed: int, index: int) -> int:
    return int(derive_seed("scene", base_seed, index) % (2**31))


def generate_dataset(out_dir, n_scenes: int, seed: int, n_val: int | None = None, grid: str = "desk",
                     **synth_overrides) -> dict:
    """Write scene JSON files plus ``manifest.json``; the n_val lowest seed hashes form val."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bev = BevGrid.desk() if grid == "desk" else BevGrid.full()
    n_val = max(1, n_scenes // 5) if n_val is None else n_val
    entries = []
    for k in range(n_scenes):
        s = scene_seed(seed, k)
        scene = generate_scene(SynthParams(seed=s, **synth_overrides), bev, scene_id=f"scene_{k:05d}")
        name = f"{scene.id}.json"
        (out / name).write_text(serialize_scene(scene))
        entries.append({"id": scene.id, "file": name, "seed": s, "hash": derive_seed("split", s)})
    ranked = sorted(entries, key=lambda e: (e["hash"], e["id"]))
    val_ids = {e["id"] for e in ranked[:n_val]}
    for e in entries:
        e["split"] = "val" if e["id"] in val_ids else "train"
        del e["hash"]
    manifest = {"seed": seed, "grid": grid, "synth": synth_overrides, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_split(data_dir, split: str) -> list[Scene]:
    manifest = load_manifest(data_dir)
    return [
        parse_scene((Path(data_dir) / e["file"]).read_text())
        for e in manifest["scenes"]
        if e["split"] == split
    ]


def scene_keypoints(scene: Scene) -> list[tuple[float, float]]:
    if scene.keypoints is not None:
        return list(scene.keypoints)
    return [k.position for k in extract_intersections(scene.sd_map)]


def snap_to_centers(points, grid: BevGrid) -> list[tuple[float, float]]:
    """Move metric points onto the center of the cell that contains them."""
    out = []
    for x, y in points:
        r, c = grid.cell_index(x, y)
        out.append((grid.window.x_min + (r + 0.5) * grid.cell, grid.window.y_min + (c + 0.5) * grid.cell))
    return out


@dataclass
class Sample:
    scene_id: str
    obs: np.ndarray
    raster: np.ndarray
    tokens: SegmentTokens
    target: np.ndarray
    heat_target: np.ndarray
    keypoints_grid: list[tuple[float, float]]


def prepare_sample(scene: Scene, config: RunConfig) -> Sample:
    grid = config.bev_grid
    sd_map = scene.sd_map
    if config.sigma_t > 0 or config.sigma_theta > 0:
        sd_map = perturb(sd_map, derive_seed("run-perturb", config.seed, scene.id), config.sigma_t, config.sigma_theta)
    kps = scene_keypoints(scene)
    return Sample(
        scene_id=scene.id,
        obs=render_observation(scene, grid, config.noise_p),
        raster=rasterize(sd_map, grid).grid,
        tokens=tokenize(sd_map, config.tokens, config.token_points, config.token_length),
        target=centerline_raster(scene, grid)[..., None],
        heat_target=render_heatmap(snap_to_centers(kps, grid), grid, config.sigma)[..., None],
        keypoints_grid=[grid.continuous(x, y) for x, y in kps],
    )


_SAMPLE_CACHE: dict[tuple, list[Sample]] = {}


def load_samples(config: RunConfig, split: str) -> list[Sample]:
    key = (
        str(Path(config.data).resolve()), split, config.grid, config.sigma, config.sigma_t, config.sigma_theta,
        config.seed if (config.sigma_t > 0 or config.sigma_theta > 0) else None,
        config.noise_p, config.tokens, config.token_points, config.token_length,
    )
    if key not in _SAMPLE_CACHE:
        _SAMPLE_CACHE[key] = [prepare_sample(s, config) for s in load_split(config.data, split)]
    return _SAMPLE_CACHE[key]


def preprocess(scenes_dir, out_dir) -> int:
    """Export raster/heatmap PGMs, token JSON and keypoint JSON for every scene file."""
    scenes_dir, out_dir = Path(scenes_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in sorted(scenes_dir.glob("*.json")):
        if path.name == "manifest.json":
            continue
        scene = parse_scene(path.read_text())
        grid = BevGrid(scene.window, 0.5)
        rasterize(scene.sd_map, grid).export_pgm(out_dir, scene.id)
        (out_dir / f"{scene.id}_tokens.json").write_text(tokenize(scene.sd_map).to_json())
        kps = extract_intersections(scene.sd_map)
        (out_dir / f"{scene.id}_keypoints.json").write_text(keypoints_to_json(kps))
        write_pgm(out_dir / f"{scene.id}_heatmap.pgm", render_heatmap(kps, grid))
        count += 1
    return count


# -- training ----------------------------------------------------------------
def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    p = clip(pred, 1e-7, 1.0 - 1e-7)
    y = np.asarray(target, dtype=float)
    return ((log(p) * y + log(1.0 - p) * (1.0 - y)).mean()) * -1.0


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def sgd_step(model: SeptModel, lr: float, clip_norm: float = 0.0) -> float:
    """Plain SGD; when ``clip_norm`` > 0 the global gradient norm is capped first. Returns the raw norm."""
    params = [p for p in model.parameters() if p.grad is not None]
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    scale = clip_norm / norm if clip_norm > 0 and norm > clip_norm else 1.0
    for p in params:
        p.data = p.data - (lr * scale) * p.grad
        p.grad = None
    return norm


def train(config: RunConfig, samples: list[Sample] | None = None, log_every: int = 0) -> tuple[SeptModel, TrainLog]:
    samples = load_samples(config, "train") if samples is None else samples
    if not samples:
        raise ValueError("training split is empty")
    model = build_model(config)
    tlog = TrainLog(config.seed, config.digest())
    order_rng = np.random.default_rng(derive_seed("order", config.seed))
    order: list[int] = []
    for step in range(config.steps):
        if not order:
            order = list(order_rng.permutation(len(samples)))
        s = samples[order.pop(0)]
        out = model(s.obs, s.raster, s.tokens)
        l_seg = bce_loss(out.occupancy, s.target)
        total = l_seg
        l_ikpd = None
        if out.heatmap is not None:
            l_ikpd = focal_loss(out.heatmap, s.heat_target)
            total = total + l_ikpd
        value = total.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step}")
        backward(total)
        sgd_step(model, config.learning_rate, config.grad_clip)
        entry = {"step": step, "loss": value, "l_seg": l_seg.item(), "l_ikpd": 0.0 if l_ikpd is None else l_ikpd.item()}
        tlog.steps.append(entry)
        if log_every and step % log_every == 0:
            log_.info("step %d loss %.5f", step, value)
    return model, tlog


def evaluate_model(model: SeptModel, samples: list[Sample], radius: float = 2.0) -> dict:
    ious, aps = [], []
    with no_grad():
        for s in samples:
            out = model(s.obs, s.raster, s.tokens)
            ious.append(occupancy_iou(out.occupancy.data[..., 0], s.target[..., 0]))
            if s.keypoints_grid:
                heat = out.heatmap.data[..., 0] if out.heatmap is not None else np.zeros(s.target.shape[:2])
                aps.append(heatmap_ap(heat, s.keypoints_grid, radius))
    return {
        "iou": float(np.mean(ious)) if ious else 0.0,
        "heatmap_ap": float(np.mean(aps)) if aps else 0.0,
        "scenes": len(samples),
    }


def save_model(model: SeptModel, path) -> None:
    save_checkpoint(path, model.state_dict())


def load_model(config: RunConfig, path) -> SeptModel:
    model = build_model(config)
    model.load_state_dict(load_checkpoint(path))
    return model


def run_training(config: RunConfig, out_dir) -> tuple[Path, TrainLog]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, tlog = train(config)
    ckpt = out / "model.ckpt"
    save_model(model, ckpt)
    metrics = evaluate_model(model, load_samples(config, config.eval_split), config.eval_radius)
    tlog.evals.append({"split": config.eval_split, **metrics})
    (out / "train_log.json").write_text(tlog.to_json())
    (out / "config.json").write_text(config.to_json())
    return ckpt, tlog


# -- ablation ----------------------------------------------------------------
ABLATION_COLUMNS = ("variant", "seed", "iou", "heatmap_ap")


def ablation_runs(config: RunConfig) -> list[tuple[str, RunConfig]]:
    if len(config.ablate_variants) + (2 if config.ft_pair else 0) < 2:
        raise ValueError("ablation needs at least two variants")
    runs = []
    for variant in config.ablate_variants:
        fusion = config.fusion if variant in ("hybrid", "hybrid_ikpd") else "dgff"
        for seed in config.ablate_seeds:
            runs.append((variant, config.replace(variant=variant, fusion=fusion, seed=seed)))
    if config.ft_pair:
        for label, use_ft in (("raster_only_ft", True), ("raster_only_noft", False)):
            for seed in config.ablate_seeds:
                runs.append((label, config.replace(
                    variant="raster_only", fusion="dgff", seed=seed, use_ft=use_ft,
                    sigma_t=config.ft_pair_sigma_t, sigma_theta=config.ft_pair_sigma_theta,
                )))
    return runs


def ablate(config: RunConfig, out_csv=None, progress=None, with_summary: bool = False) -> list[dict]:
    rows = []
    for label, cfg in ablation_runs(config):
        model, _ = train(cfg)
        metrics = evaluate_model(model, load_samples(cfg, cfg.eval_split), cfg.eval_radius)
        row = {"variant": label, "seed": cfg.seed, "iou": metrics["iou"], "heatmap_ap": metrics["heatmap_ap"]}
        rows.append(row)
        if progress:
            progress(row)
    if out_csv is not None:
        write_ablation_csv(out_csv, rows, with_summary)
    return rows


def write_ablation_csv(path, rows: list[dict], with_summary: bool = False) -> None:
    """Per-run rows; ``with_summary`` appends ``mean`` and ``spread`` rows per variant in the same columns."""
    out = list(rows)
    if with_summary:
        for label, stats in summarize(rows).items():
            out.append({"variant": label, "seed": "mean", "iou": stats["iou_mean"], "heatmap_ap": stats["ap_mean"]})
            out.append({"variant": label, "seed": "spread", "iou": stats["iou_spread"], "heatmap_ap": stats["ap_spread"]})
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in out:
            writer.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in ABLATION_COLUMNS})


def summarize(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Mean and spread (population std) of iou / heatmap_ap per variant label."""
    out: dict[str, dict[str, float]] = {}
    for label in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == label]
        iou = np.array([r["iou"] for r in sel])
        ap = np.array([r["heatmap_ap"] for r in sel])
        out[label] = {
            "iou_mean": float(iou.mean()),
            "iou_spread": float(iou.std()),
            "ap_mean": float(ap.mean()),
            "ap_spread": float(ap.std()),
            "runs": len(sel),
        }
    return out


__all__ = [
    "NumericError",
    "generate_dataset",
    "load_split",
    "prepare_sample",
    "load_samples",
    "preprocess",
    "train",
    "evaluate_model",
    "run_training",
    "ablate",
    "summarize",
    "save_model",
    "load_model",
    "write_ablation_csv",
    "bce_loss",
    "sgd_step",
    "TrainLog",
    "Sample",
]
