"""Dual gated fusion of the raster- and vector-augmented BEV features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module
from .tensor import ShapeError, Tensor, concat, relu, sigmoid


@dataclass(frozen=True)
class FusionWeights:
    mu: float = 0.5
    nu: float = 0.5

    def __post_init__(self):
        if self.mu < 0 or self.nu < 0:
            raise ValueError("fusion weights must be non-negative")


def _same_shape(f_r: Tensor, f_v: Tensor) -> None:
    if f_r.shape != f_v.shape:
        raise ShapeError(f"fusion inputs differ: {f_r.shape} vs {f_v.shape}")


class ConcatFFN(Module):
    """concat(f_r, f_v) -> 2C -> rectifier -> C."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.fc1 = Linear(2 * channels, 2 * channels, rng)
        self.fc2 = Linear(2 * channels, channels, rng)

    def forward(self, f_r: Tensor, f_v: Tensor) -> Tensor:
        _same_shape(f_r, f_v)
        return self.fc2(relu(self.fc1(concat([f_r, f_v], axis=-1))))


def gates(f_r: Tensor, f_v: Tensor) -> tuple[Tensor, Tensor]:
    _same_shape(f_r, f_v)
    return sigmoid(f_r), sigmoid(f_v)


class DGFF(Module):
    def __init__(self, channels: int, rng: np.random.Generator, weights: FusionWeights = FusionWeights()):
        self.weights = weights
        self.fuse = ConcatFFN(channels, rng)
        self.proj_r = Linear(channels, channels, rng)
        self.proj_v = Linear(channels, channels, rng)

    def forward(self, f_r: Tensor, f_v: Tensor) -> Tensor:
        fused = self.fuse(f_r, f_v)
        w_r, w_v = gates(f_r, f_v)
        return self.weights.mu * self.proj_r(w_r * fused) + self.weights.nu * self.proj_v(w_v * fused)


def fuse_concat(module: ConcatFFN, f_r: Tensor, f_v: Tensor) -> Tensor:
    return module(f_r, f_v)


def dgff_fuse(module: DGFF, f_r: Tensor, f_v: Tensor, weights: FusionWeights | None = None) -> Tensor:
    if weights is not None and weights != module.weights:
        module = _with_weights(module, weights)
    return module(f_r, f_v)


def _with_weights(module: DGFF, weights: FusionWeights) -> DGFF:
    clone = DGFF.__new__(DGFF)
    clone.__dict__.update(module.__dict__)
    clone.weights = weights
    return clone
