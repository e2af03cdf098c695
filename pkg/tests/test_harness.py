import csv
import json

import numpy as np
import pytest

from sept import harness
from sept.harness import (
    ABLATION_COLUMNS,
    NumericError,
    ablate,
    evaluate_model,
    generate_dataset,
    load_model,
    load_samples,
    run_training,
    save_model,
    summarize,
    train,
    write_ablation_csv,
)
from sept.metrics import occupancy_iou
from sept.model import ConfigError, RunConfig, build_model
from sept.tensor import Tensor, conv2d

SMALL = dict(channels=8, heads=2, tokens=16, encoder_depth=2, encoder_blocks=1)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    generate_dataset(d, 6, seed=0, n_val=2)
    return d


def cfg(data_dir, **kw):
    base = dict(SMALL, data=str(data_dir), steps=3)
    base.update(kw)
    return RunConfig(**base)


# -- dataset -----------------------------------------------------------------
def test_manifest_split_and_determinism(tmp_path):
    a = generate_dataset(tmp_path / "a", 10, seed=3, n_val=3)
    b = generate_dataset(tmp_path / "b", 10, seed=3, n_val=3)
    assert a == b
    assert sum(e["split"] == "val" for e in a["scenes"]) == 3
    for e in a["scenes"]:
        assert (tmp_path / "a" / e["file"]).read_text() == (tmp_path / "b" / e["file"]).read_text()


def test_missing_manifest_is_reported(tmp_path):
    with pytest.raises(FileNotFoundError):
        harness.load_split(tmp_path, "train")


def test_preprocess_writes_expected_files(data_dir, tmp_path):
    n = harness.preprocess(data_dir, tmp_path)
    assert n == 6
    names = {p.name for p in tmp_path.iterdir()}
    for suffix in ("_road.pgm", "_crosswalk.pgm", "_sidewalk.pgm", "_heatmap.pgm", "_tokens.json", "_keypoints.json"):
        assert "scene_00000" + suffix in names


# -- config ------------------------------------------------------------------
@pytest.mark.parametrize(
    "kw,needle",
    [
        ({"variant": "nope"}, "variant"),
        ({"fusion": "nope"}, "fusion"),
        ({"variant": "baseline", "fusion": "add"}, "baseline"),
        ({"mu": -1.0}, "mu"),
        ({"grid": "huge"}, "grid"),
        ({"steps": -1}, "steps"),
    ],
)
def test_invalid_config_named(kw, needle):
    with pytest.raises(ConfigError, match=needle):
        RunConfig(**kw)


def test_config_unknown_keys(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"variant": "hybrid", "bogus": 1}))
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.load(path)


def test_config_json_round_trip(tmp_path):
    c = RunConfig(variant="hybrid", fusion="add", mu=0.2, nu=0.8, seed=4)
    path = tmp_path / "c.json"
    path.write_text(c.to_json())
    assert RunConfig.load(path) == c
    assert RunConfig.load(path).digest() == c.digest()


# -- wiring ------------------------------------------------------------------
def test_baseline_ignores_sd_inputs(data_dir):
    c = cfg(data_dir, variant="baseline")
    model = build_model(c)
    s0, s1 = load_samples(c, "train")[:2]
    a = model(s0.obs, s0.raster, s0.tokens).occupancy.data
    b = model(s0.obs, s1.raster, s1.tokens).occupancy.data
    c_ = model(s0.obs, np.random.default_rng(0).uniform(size=s0.raster.shape), None).occupancy.data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c_)


def test_sd_variants_depend_on_sd_inputs(data_dir):
    for variant in ("raster_only", "vector_only", "hybrid"):
        c = cfg(data_dir, variant=variant)
        model = build_model(c)
        s0, s1 = load_samples(c, "train")[:2]
        a = model(s0.obs, s0.raster, s0.tokens).occupancy.data
        b = model(s0.obs, s1.raster, s1.tokens).occupancy.data
        assert not np.array_equal(a, b), variant


def test_add_fusion_wiring(data_dir):
    c = cfg(data_dir, variant="hybrid", fusion="add", use_ft=False)
    model = build_model(c)
    s = load_samples(c, "train")[0]
    out = model(s.obs, s.raster, s.tokens)
    f_b = model.obs_encoder(Tensor(s.obs))
    f_v = model.cross_attention(f_b, model.vector_encoder(s.tokens), s.tokens)
    f_r = model.raster_encoder(Tensor(s.raster))
    np.testing.assert_allclose(out.features.data, f_r.data + f_v.data, rtol=0, atol=1e-12)
    head = model.occupancy_head
    logits = conv2d(out.features, head.weight, head.bias).data
    np.testing.assert_allclose(out.occupancy.data, 1.0 / (1.0 + np.exp(-logits)), atol=1e-12)


def test_heads_per_variant(data_dir):
    for variant in ("baseline", "raster_only", "vector_only", "hybrid"):
        model = build_model(cfg(data_dir, variant=variant))
        assert model.ikpd is None
    model = build_model(cfg(data_dir, variant="hybrid_ikpd"))
    s = load_samples(cfg(data_dir), "train")[0]
    out = model(s.obs, s.raster, s.tokens)
    assert out.heatmap is not None and out.heatmap.shape == out.occupancy.shape


def test_parameter_count_by_enumeration_and_seed_stable(data_dir):
    counts = []
    for seed in range(3):
        model = build_model(cfg(data_dir, variant="hybrid_ikpd", seed=seed))
        enumerated = sum(int(np.prod(p.shape)) for _, p in model.named_parameters())
        assert model.num_parameters() == enumerated
        counts.append(enumerated)
    assert len(set(counts)) == 1
    assert build_model(cfg(data_dir, variant="baseline")).num_parameters() < counts[0]


# -- training ----------------------------------------------------------------
def test_fifty_steps_on_one_scene_reduce_loss(data_dir):
    c = cfg(data_dir, variant="hybrid_ikpd", steps=50, seed=0)
    sample = load_samples(c, "train")[:1]
    _, log = train(c, sample)
    losses = [s["loss"] for s in log.steps]
    assert losses[-1] < losses[0]


def test_zero_learning_rate_keeps_parameters(data_dir):
    c = cfg(data_dir, variant="hybrid_ikpd", steps=3, learning_rate=0.0)
    fresh = build_model(c)
    trained, _ = train(c)
    for (name, a), (_, b) in zip(fresh.named_parameters(), trained.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_same_seed_identical_log(data_dir):
    c = cfg(data_dir, variant="hybrid_ikpd", steps=4)
    _, a = train(c)
    _, b = train(c)
    assert a.to_json() == b.to_json()
    _, other = train(c.replace(seed=1))
    assert other.to_json() != a.to_json()


def test_log_losses_finite_and_nonnegative(data_dir):
    _, log = train(cfg(data_dir, variant="hybrid_ikpd", steps=5))
    for entry in log.steps:
        for key in ("loss", "l_seg", "l_ikpd"):
            assert np.isfinite(entry[key]) and entry[key] >= 0
        assert entry["loss"] == pytest.approx(entry["l_seg"] + entry["l_ikpd"])
    assert log.seed == 0 and log.config_hash


def test_divergence_guard_reports_step(data_dir, monkeypatch):
    real = harness.bce_loss
    calls = {"n": 0}

    def poisoned(pred, target):
        calls["n"] += 1
        loss = real(pred, target)
        return loss * float("nan") if calls["n"] == 3 else loss

    monkeypatch.setattr(harness, "bce_loss", poisoned)
    with pytest.raises(NumericError, match="step 2"):
        train(cfg(data_dir, variant="baseline", steps=5))


def test_empty_training_split(data_dir):
    with pytest.raises(ValueError):
        train(cfg(data_dir), samples=[])


def test_gradient_clipping_caps_update():
    c = RunConfig(**SMALL, variant="baseline")
    model = build_model(c)
    before = [p.data.copy() for p in model.parameters()]
    for p in model.parameters():
        p.grad = np.full(p.shape, 10.0)
    norm = harness.sgd_step(model, 1.0, clip_norm=1.0)
    step = np.sqrt(sum(((p.data - b) ** 2).sum() for p, b in zip(model.parameters(), before)))
    assert norm > 1.0
    assert step == pytest.approx(1.0)


# -- evaluation --------------------------------------------------------------
def test_iou_oracle_cases():
    gt = np.zeros((4, 4))
    gt[0, 0] = gt[0, 1] = gt[1, 0] = 1
    pred = np.zeros((4, 4))
    pred[0, 0] = pred[0, 1] = pred[3, 3] = 1  # 2 TP, 1 FP, 1 FN
    assert occupancy_iou(pred, gt) == pytest.approx(50.0)
    assert occupancy_iou(gt, gt) == 100.0
    assert occupancy_iou(np.zeros((4, 4)), gt) == 0.0


def test_evaluate_with_oracle_injection(data_dir):
    c = cfg(data_dir, variant="baseline")
    samples = load_samples(c, "val")

    class Oracle:
        def __init__(self, zero=False):
            self.zero = zero

        def __call__(self, obs, raster, tokens):
            s = next(x for x in samples if x.obs is obs)
            occ = np.zeros_like(s.target) if self.zero else s.target
            return type("Out", (), {"occupancy": Tensor(occ), "heatmap": Tensor(s.heat_target)})()

    assert evaluate_model(Oracle(), samples)["iou"] == 100.0
    assert evaluate_model(Oracle(zero=True), samples)["iou"] == 0.0


def test_checkpoint_round_trip_bit_exact(data_dir, tmp_path):
    c = cfg(data_dir, variant="hybrid_ikpd", steps=3)
    model, _ = train(c)
    val = load_samples(c, "val")
    save_model(model, tmp_path / "m.ckpt")
    restored = load_model(c, tmp_path / "m.ckpt")
    assert evaluate_model(model, val) == evaluate_model(restored, val)


def test_checkpoint_config_mismatch(data_dir, tmp_path):
    model, _ = train(cfg(data_dir, variant="hybrid_ikpd", steps=1))
    save_model(model, tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="mismatch"):
        load_model(cfg(data_dir, variant="hybrid"), tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="mismatch"):
        load_model(cfg(data_dir, variant="hybrid_ikpd", channels=12, heads=2), tmp_path / "m.ckpt")


def test_run_training_outputs(data_dir, tmp_path):
    c = cfg(data_dir, variant="raster_only", steps=2)
    ckpt, log = run_training(c, tmp_path)
    assert ckpt.exists()
    saved = json.loads((tmp_path / "train_log.json").read_text())
    assert saved["seed"] == c.seed and saved["config_hash"] == c.digest()
    assert saved["evals"][0]["split"] == "val"
    assert RunConfig.load(tmp_path / "config.json") == c


# -- ablation ----------------------------------------------------------------
def test_ablation_needs_two_variants(data_dir):
    with pytest.raises(ValueError):
        ablate(cfg(data_dir, ablate_variants=["baseline"], ft_pair=False))


def test_ablation_duplicate_variant_rows_identical(data_dir, tmp_path):
    c = cfg(data_dir, ablate_variants=["baseline", "baseline"], ablate_seeds=[0], ft_pair=False, steps=2)
    rows = ablate(c, tmp_path / "a.csv")
    assert len(rows) == 2
    assert rows[0] == rows[1]


def test_ablation_csv_schema_and_summary(data_dir, tmp_path):
    c = cfg(data_dir, ablate_variants=["baseline", "raster_only"], ablate_seeds=[0, 1], ft_pair=True, steps=1)
    rows = ablate(c, tmp_path / "a.csv", with_summary=True)
    labels = [r["variant"] for r in rows]
    assert labels == ["baseline"] * 2 + ["raster_only"] * 2 + ["raster_only_ft"] * 2 + ["raster_only_noft"] * 2
    with open(tmp_path / "a.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = list(reader)
    assert tuple(header) == ABLATION_COLUMNS == ("variant", "seed", "iou", "heatmap_ap")
    assert len(body) == len(rows) + 2 * 4
    summary = summarize(rows)
    mean_row = next(r for r in body if r[0] == "baseline" and r[1] == "mean")
    assert float(mean_row[2]) == pytest.approx(summary["baseline"]["iou_mean"])
    ious = [r["iou"] for r in rows if r["variant"] == "baseline"]
    assert summary["baseline"]["iou_spread"] == pytest.approx(np.std(ious))


def test_write_ablation_csv_floats_round_trip(tmp_path):
    rows = [{"variant": "x", "seed": 0, "iou": 1 / 3, "heatmap_ap": 0.1}]
    write_ablation_csv(tmp_path / "r.csv", rows)
    with open(tmp_path / "r.csv", newline="") as fh:
        got = list(csv.DictReader(fh))
    assert float(got[0]["iou"]) == 1 / 3

