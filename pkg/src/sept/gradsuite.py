"""Central-difference gradient checks for every differentiable building block."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .dgff import DGFF, ConcatFFN, FusionWeights, gates
from .geometry import BevGrid, Window
from .ikpd import IKPDHead, focal_loss
from .model import RunConfig, SeptModel
from .raster import FeatureTransform, FilmParams, RasterEncoder, film_modulate, rasterize
from .sdmap import LocalMap, Polyline
from .tensor import (
    Tensor,
    conv2d,
    global_max_pool,
    grad_check,
    layer_norm,
    matmul,
    sigmoid,
    softmax_rows,
)
from .harness import bce_loss
from .vector import BevCrossAttention, SegmentTokens, VectorEncoder, tokenize

TOLERANCE = 1e-4
EPS = 1e-5


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out.shape)
    return lambda t: (t * w).sum()


def _checkable(module) -> list[Tensor]:
    """Parameters of ``module`` minus biases added uniformly to every attention key.

    A bias added to every key shifts each score row by a constant, which the
    softmax ignores, so its true gradient is identically zero and a
    coordinate-wise relative error would only measure finite-difference noise.
    """
    skip = ("attn.k.bias", "key_pos.bias")
    return [p for name, p in module.named_parameters() if not name.endswith(skip)]


def _check(fn: Callable[[], Tensor], inputs, rng) -> float:
    probe = fn()
    reduce = _weighted(probe, rng)
    return grad_check(lambda: reduce(fn()), inputs, EPS)


def _rand(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape))


def case_matmul(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, k, m = rng.integers(1, 6, size=3)
    a, b = _rand(rng, n, k), _rand(rng, k, m)
    return _check(lambda: matmul(a, b), [a, b], rng)


def case_conv2d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    h, w = rng.integers(4, 8, size=2)
    cin, cout = rng.integers(1, 4, size=2)
    stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x, k, b = _rand(rng, h, w, cin), _rand(rng, 3, 3, cin, cout), _rand(rng, cout)
    return _check(lambda: conv2d(x, k, b, stride=stride, dilation=dilation), [x, k, b], rng)


def case_depthwise_conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    h, w = rng.integers(4, 8, size=2)
    c = int(rng.integers(1, 4))
    dilation = int(rng.integers(1, 3))
    x, k, b = _rand(rng, h, w, c), _rand(rng, 3, 3, c), _rand(rng, c)
    return _check(lambda: conv2d(x, k, b, dilation=dilation, depthwise=True), [x, k, b], rng)


def case_sigmoid(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, *rng.integers(1, 6, size=2), scale=3.0)
    return _check(lambda: sigmoid(x), [x], rng)


def case_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 6, size=2)
    x = _rand(rng, n, m)
    mask = rng.uniform(size=m) < 0.7
    mask[0] = True
    return _check(lambda: softmax_rows(x, mask), [x], rng)


def case_max_pool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, *rng.integers(1, 6, size=3))
    return _check(lambda: global_max_pool(x), [x], rng)


def case_layer_norm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _rand(rng, int(rng.integers(1, 5)), int(rng.integers(2, 8)))
    return _check(lambda: layer_norm(x), [x], rng)


def case_raster_encoder(seed: int) -> float:
    rng = np.random.default_rng(seed)
    enc = RasterEncoder(4, rng, depth=2)
    tile = _rand(rng, 8, 8, 3)
    return _check(lambda: enc(tile), [tile, *enc.parameters()], rng)


def _trained_like(module, rng) -> None:
    """Give zero-initialized layers random values so every path carries gradient."""
    for p in module.parameters():
        if not np.any(p.data):
            p.data = rng.normal(scale=0.5, size=p.shape)


def case_feature_transform(seed: int) -> float:
    rng = np.random.default_rng(seed)
    ft = FeatureTransform(8, rng)
    _trained_like(ft, rng)
    a, b = _rand(rng, 6, 4, 8), _rand(rng, 6, 4, 8)

    def fn():
        return film_modulate(a, ft(a, b))

    return _check(fn, [a, b, *ft.parameters()], rng)


def _random_tokens(rng, m: int, p: int, real: int) -> SegmentTokens:
    pts = np.zeros((m, p, 2))
    cat = np.zeros((m, 3))
    mask = np.zeros(m, dtype=bool)
    for i in range(real):
        start = rng.uniform(-4, 4, size=2)
        pts[i] = start + np.linspace(0, 1, p)[:, None] * rng.uniform(-3, 3, size=2)
        cat[i, rng.integers(3)] = 1.0
        mask[i] = True
    return SegmentTokens(pts, cat, mask)


def case_vector_encoder(seed: int) -> float:
    rng = np.random.default_rng(seed)
    enc = VectorEncoder(8, 3, rng, blocks=2, heads=2, coord_scale=4.0)
    tokens = _random_tokens(rng, 4, 3, int(rng.integers(2, 5)))
    return _check(lambda: enc(tokens), _checkable(enc), rng)


def case_cross_attention(seed: int) -> float:
    rng = np.random.default_rng(seed)
    grid = BevGrid(Window(-2.0, 2.0, -1.5, 1.5), 0.5)
    enc = VectorEncoder(8, 3, rng, blocks=1, heads=2, coord_scale=4.0)
    xattn = BevCrossAttention(8, 2, grid, rng)
    tokens = _random_tokens(rng, 4, 3, int(rng.integers(2, 5)))
    f_b = _rand(rng, grid.H, grid.W, 8)
    return _check(lambda: xattn(f_b, enc(tokens), tokens), [f_b, *_checkable(xattn), *_checkable(enc)], rng)


def case_dgff(seed: int) -> float:
    rng = np.random.default_rng(seed)
    mod = DGFF(8, rng, FusionWeights(float(rng.uniform(0.1, 1)), float(rng.uniform(0.1, 1))))
    _trained_like(mod, rng)
    f_r, f_v = _rand(rng, 4, 4, 8), _rand(rng, 4, 4, 8)
    return _check(lambda: mod(f_r, f_v), [f_r, f_v, *mod.parameters()], rng)


def case_concat_ffn(seed: int) -> float:
    rng = np.random.default_rng(seed)
    mod = ConcatFFN(8, rng)
    f_r, f_v = _rand(rng, 4, 4, 8), _rand(rng, 4, 4, 8)
    return _check(lambda: mod(f_r, f_v), [f_r, f_v, *mod.parameters()], rng)


def case_film_gate(seed: int) -> float:
    rng = np.random.default_rng(seed)
    f, g, b, other = _rand(rng, 3, 3, 4), _rand(rng, 4), _rand(rng, 4), _rand(rng, 3, 3, 4)

    def fn():
        mod = film_modulate(f, FilmParams(g, b))
        w_r, w_v = gates(mod, other)
        return w_r * mod + w_v * other

    return _check(fn, [f, g, b, other], rng)


def case_ikpd_head(seed: int) -> float:
    rng = np.random.default_rng(seed)
    head = IKPDHead(8, rng)
    f = _rand(rng, 8, 8, 8)
    return _check(lambda: head(f), [f, *head.parameters()], rng)


def case_focal_loss(seed: int) -> float:
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 7, size=2)
    pred = Tensor(rng.uniform(0.05, 0.95, size=(h, w, 1)))
    target = rng.uniform(0, 0.9, size=(h, w, 1))
    target[rng.uniform(size=target.shape) < 0.2] = 1.0
    return grad_check(lambda: focal_loss(pred, target), [pred], EPS)


def case_composed_model(seed: int) -> float:
    rng = np.random.default_rng(seed)
    grid = BevGrid(Window(-2.0, 2.0, -1.0, 1.0), 0.5)
    cfg = RunConfig(variant="hybrid_ikpd", channels=8, heads=2, encoder_depth=1, encoder_blocks=1,
                    tokens=4, token_points=3, seed=seed)
    model = SeptModel(cfg, grid)
    _trained_like(model, rng)
    # keep heatmap logits out of sigmoid saturation: near p = 1 the focal term log(1 - p)
    # makes central differences ill-conditioned even though backprop is exact
    model.ikpd.out.weight.data *= 0.25
    local = LocalMap(
        [Polyline("road", [[-1.8, -0.6], [1.7, 0.4]]), Polyline("crosswalk", [[0.2, -0.9], [-0.3, 0.9]])],
        grid.window,
    )
    raster = rasterize(local, grid).grid
    tokens = tokenize(local, 4, 3, 25.0)
    obs = Tensor(rng.normal(size=(grid.H, grid.W, 2)))
    target = rng.uniform(size=(grid.H, grid.W, 1)) < 0.3
    heat = rng.uniform(0, 0.9, size=(grid.H, grid.W, 1))
    heat[0, 0, 0] = 1.0
    def fn():
        out = model(obs, raster, tokens)
        return bce_loss(out.occupancy, target) + focal_loss(out.heatmap, heat)

    params = [model.feature_transform.head.weight, model.fusion.proj_r.weight, model.ikpd.out.weight]
    return grad_check(fn, [obs, *params], EPS)


CASES: dict[str, Callable[[int], float]] = {
    "matmul": case_matmul,
    "conv2d": case_conv2d,
    "depthwise_conv2d": case_depthwise_conv,
    "sigmoid": case_sigmoid,
    "softmax_rows": case_softmax,
    "global_max_pool": case_max_pool,
    "layer_norm": case_layer_norm,
    "raster_encoder": case_raster_encoder,
    "feature_transform_film": case_feature_transform,
    "film_gate_graph": case_film_gate,
    "vector_encoder": case_vector_encoder,
    "bev_cross_attention": case_cross_attention,
    "concat_ffn": case_concat_ffn,
    "dgff": case_dgff,
    "ikpd_head": case_ikpd_head,
    "focal_loss": case_focal_loss,
    "composed_model": case_composed_model,
}


def run_suite(seeds=range(10), report: Callable[[str, int, float], None] | None = None) -> dict[str, float]:
    """Worst relative error per case over ``seeds``."""
    worst: dict[str, float] = {}
    for name, case in CASES.items():
        for seed in seeds:
            err = case(seed)
            worst[name] = max(worst.get(name, 0.0), err)
            if report:
                report(name, seed, err)
    return worst
