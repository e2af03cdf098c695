"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, linear, relu


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise ValueError(f"shape mismatch for {name}: {p.shape} vs {state[name].shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, zero: bool = False, bias: bool = True):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
        self.weight = param(w)
        self.bias = param(np.zeros(fan_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    """k x k convolution over H x W x C arrays, spatial extent preserved."""

    def __init__(
        self,
        cin: int,
        cout: int,
        k: int,
        rng: np.random.Generator,
        dilation: int = 1,
        depthwise: bool = False,
        zero: bool = False,
    ):
        self.dilation = dilation
        self.depthwise = depthwise
        shape = (k, k, cin) if depthwise else (k, k, cin, cout)
        fan_in = k * k * (1 if depthwise else cin)
        w = np.zeros(shape) if zero else rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self.weight = param(w)
        self.bias = param(np.zeros(cin if depthwise else cout))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, dilation=self.dilation, depthwise=self.depthwise)


class ConvStack(Module):
    """``depth`` 3x3 conv + rectifier blocks mapping cin -> channels."""

    def __init__(self, cin: int, channels: int, depth: int, rng: np.random.Generator):
        self.blocks = [Conv2d(cin if i == 0 else channels, channels, 3, rng) for i in range(depth)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = relu(block(x))
        return x
