"""Vector SD-map branch: segment tokens, self-attention encoder, BEV cross-attention."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import BevGrid, polyline_length, resample_polyline, sub_polyline
from .nn import Linear, Module
from .sdmap import Category, LocalMap
from .tensor import Tensor, layer_norm, matmul, relu, softmax_rows


@dataclass
class SegmentTokens:
    points: np.ndarray  # M x P x 2, meters
    category: np.ndarray  # M x 3 one-hot
    mask: np.ndarray  # M, True = real segment
    dropped: int = 0

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def midpoints(self) -> np.ndarray:
        p = self.points.shape[1]
        return 0.5 * (self.points[:, (p - 1) // 2] + self.points[:, p // 2])

    def permuted(self, order) -> "SegmentTokens":
        order = np.asarray(order)
        return SegmentTokens(self.points[order], self.category[order], self.mask[order], self.dropped)

    def to_json(self) -> str:
        real = np.nonzero(self.mask)[0]
        return json.dumps(
            {
                "tokens": [
                    {
                        "category": [c.value for c in Category][int(np.argmax(self.category[i]))],
                        "points": self.points[i].tolist(),
                    }
                    for i in real
                ],
                "slots": int(len(self.mask)),
                "dropped": self.dropped,
            }
        )


def split_by_length(points: np.ndarray, max_len: float) -> list[np.ndarray]:
    """Cut a polyline at arc-length multiples of ``max_len``."""
    total = polyline_length(points)
    cuts = [0.0]
    while cuts[-1] + max_len < total - 1e-9:
        cuts.append(cuts[-1] + max_len)
    cuts.append(total)
    return [sub_polyline(points, a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def tokenize(local_map: LocalMap, M: int = 32, P: int = 11, max_len: float = 25.0) -> SegmentTokens:
    if M < 1 or P < 2:
        raise ValueError("tokenize needs M >= 1 and P >= 2")
    points = np.zeros((M, P, 2))
    category = np.zeros((M, 3))
    mask = np.zeros(M, dtype=bool)
    slot = dropped = 0
    for pl in local_map.polylines:
        for chunk in split_by_length(pl.points, max_len):
            if slot >= M:
                dropped += 1
                continue
            points[slot] = resample_polyline(chunk, P)
            category[slot, pl.category.channel] = 1.0
            mask[slot] = True
            slot += 1
    return SegmentTokens(points, category, mask, dropped)


def sinusoidal(coords: np.ndarray, channels: int, extent: float, max_freq: float = 32.0) -> np.ndarray:
    """Sin/cos features of 2-D coordinates; ``channels`` must be divisible by 4."""
    if channels % 4:
        raise ValueError("positional encoding width must be divisible by 4")
    nf = channels // 4
    freqs = math.pi * max_freq ** (np.arange(nf) / max(nf - 1, 1))
    xy = np.asarray(coords, dtype=float)[..., None, :] / extent  # ... x 1 x 2
    ang = xy * freqs[:, None]  # ... x nf x 2
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)  # ... x nf x 4
    return feats.reshape(*xy.shape[:-2], channels)


class MultiHeadAttention(Module):
    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        if channels % heads:
            raise ValueError("channels must divide evenly into heads")
        self.heads = heads
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        n, c = x.shape
        return x.reshape(n, self.heads, c // self.heads).transpose(1, 0, 2)

    def forward(self, queries: Tensor, keys: Tensor, values: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        nq, c = queries.shape
        q = self._split(self.q(queries))
        k = self._split(self.k(keys))
        v = self._split(self.v(values))
        scores = matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(c // self.heads))
        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[None, None, :]
        attn = softmax_rows(scores, mask)
        self.last_weights = attn.data
        mixed = matmul(attn, v).transpose(1, 0, 2).reshape(nq, c)
        return self.out(mixed)


class EncoderBlock(Module):
    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(channels, heads, rng)
        self.ff1 = Linear(channels, 2 * channels, rng)
        self.ff2 = Linear(2 * channels, channels, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        keep = mask.astype(float)[:, None]
        x = layer_norm(x + self.attn(x, x, x, mask)) * keep
        x = layer_norm(x + self.ff2(relu(self.ff1(x)))) * keep
        return x


class VectorEncoder(Module):
    """Embed each token (points + category) and run masked self-attention blocks."""

    def __init__(self, channels: int, points: int, rng: np.random.Generator, blocks: int = 2, heads: int = 4,
                 coord_scale: float = 16.0):
        self.coord_scale = coord_scale
        self.embed = Linear(2 * points + 3, channels, rng)
        self.blocks = [EncoderBlock(channels, heads, rng) for _ in range(blocks)]

    def forward(self, tokens: SegmentTokens) -> Tensor:
        m = tokens.points.shape[0]
        raw = np.concatenate([tokens.points.reshape(m, -1) / self.coord_scale, tokens.category], axis=1)
        keep = tokens.mask.astype(float)[:, None]
        x = self.embed(Tensor(raw * keep)) * keep
        for block in self.blocks:
            x = block(x, tokens.mask)
        return x


class BevCrossAttention(Module):
    """BEV cells query SD tokens; the result is added back onto the BEV feature."""

    def __init__(self, channels: int, heads: int, grid: BevGrid, rng: np.random.Generator, residual: bool = True):
        self.channels = channels
        self.residual = residual
        extent = max(abs(v) for v in grid.window.as_list())
        self.extent = extent
        self.query_pos = sinusoidal(grid.cell_centers(), channels, extent).reshape(-1, channels)
        self.key_pos = Linear(channels, channels, rng)
        self.attn = MultiHeadAttention(channels, heads, rng)

    def forward(self, f_b: Tensor, f_sd_v: Tensor, tokens: SegmentTokens) -> Tensor:
        h, w, c = f_b.shape
        if not tokens.mask.any():
            return f_b
        queries = f_b.reshape(h * w, c) + self.query_pos
        pos = self.key_pos(Tensor(sinusoidal(tokens.midpoints(), c, self.extent)))
        keys = f_sd_v + pos
        attended = self.attn(queries, keys, f_sd_v, tokens.mask).reshape(h, w, c)
        return f_b + attended if self.residual else attended


__all__ = [
    "SegmentTokens",
    "tokenize",
    "split_by_length",
    "sinusoidal",
    "MultiHeadAttention",
    "VectorEncoder",
    "BevCrossAttention",
]
