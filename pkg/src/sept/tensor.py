"""Minimal reverse-mode differentiable dense arrays.

Every array holds 64-bit floats.  Operations on arrays that require
gradients record a node (parents + backward closure); ``backward`` replays
those nodes in reverse topological order exactly once.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradError",
    "ShapeError",
    "tensor",
    "as_tensor",
    "matmul",
    "linear",
    "conv2d",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softmax_rows",
    "global_max_pool",
    "global_avg_pool",
    "concat",
    "clip",
    "layer_norm",
    "grad_check",
    "no_grad",
    "save_checkpoint",
    "load_checkpoint",
]


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording any gradient nodes."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class ShapeError(ValueError):
    pass


class GradError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence] | None = None
        self._consumed = False

    # -- construction -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out._consumed = False
        tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = bool(tracked)
        if tracked:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g):
            return (-g,)

        return Tensor._from_op(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), backward)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        p = float(exponent)

        def backward(g):
            return (g * p * a.data ** (p - 1.0),)

        return Tensor._from_op(a.data**p, (a,), backward)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def backward(g):
            return (g.reshape(a.shape),)

        return Tensor._from_op(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        a = self

        def backward(g):
            return (g.transpose(inverse),)

        return Tensor._from_op(a.data.transpose(axes), (a,), backward)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(a.data[index], (a,), backward)

    # -- reductions ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- gradient replay ----------------------------------------------
    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> list[Tensor]:
    """Propagate d(loss)/d(node) to every leaf reachable from ``loss``.

    Returns the leaves that received gradients.  The record is freed after
    the call, so a second call on the same loss raises ``GradError``.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradError("backward already ran on this record")
    if not loss.requires_grad:
        raise GradError("loss is detached from any recorded computation")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node._accumulate(g)
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._consumed = True
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node.requires_grad = False
    return leaves


# -- kernels ---------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes must agree)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight + bias`` along the last axis of ``x``."""
    lead = x.shape[:-1]
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    out = matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        out = out + bias
    return out.reshape(*lead, weight.shape[1])


def _elementwise(x: Tensor, value: np.ndarray, local_grad: np.ndarray) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g * local_grad,)

    return Tensor._from_op(value, (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _elementwise(x, s, s * (1.0 - s))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _elementwise(x, np.where(on, x.data, 0.0), on.astype(np.float64))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _elementwise(x, e, e)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _elementwise(x, np.log(x.data), 1.0 / x.data)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _elementwise(x, np.clip(x.data, lo, hi), inside.astype(np.float64))


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable to ``x``, True = keep) removes entries from the
    normalization; they receive exactly zero weight.  Rows with nothing
    kept come out all-zero.
    """
    x = as_tensor(x)
    z = x.data
    if mask is None:
        keep = np.ones(z.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    shifted = np.where(keep, z, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(keep, np.exp(np.where(keep, z - row_max, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return Tensor._from_op(p, (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum of an H x W x C array.

    Ties resolve to the first cell in row-major order.
    """
    x = as_tensor(x)
    h, w, c = x.shape
    flat = x.data.reshape(h * w, c)
    idx = np.argmax(flat, axis=0)
    cols = np.arange(c)

    def backward(g):
        full = np.zeros_like(flat)
        full[idx, cols] = g
        return (full.reshape(x.shape),)

    return Tensor._from_op(flat[idx, cols], (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(0, 1))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return parts

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean and unit variance."""
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    depthwise: bool = False,
) -> Tensor:
    """2-D cross-correlation over an H x W x Cin array with zero padding.

    ``kernels`` is kh x kw x Cin x Cout, or kh x kw x C when ``depthwise``.
    Padding is ``dilation * (k - 1) // 2`` per side, which preserves H x W
    for odd kernels at stride 1.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects H x W x C input, got {x.shape}")
    h, w, cin = x.shape
    kh, kw = kernels.shape[:2]
    if depthwise:
        if kernels.ndim != 3 or kernels.shape[2] != cin:
            raise ShapeError(f"depthwise kernels {kernels.shape} do not match {cin} channels")
    elif kernels.ndim != 4 or kernels.shape[2] != cin:
        raise ShapeError(f"kernels {kernels.shape} do not match input {x.shape}")
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    eff_h, eff_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if eff_h > h + 2 * ph or eff_w > w + 2 * pw:
        raise ShapeError(f"kernel extent {eff_h}x{eff_w} exceeds padded input {h + 2 * ph}x{w + 2 * pw}")
    ho = (h + 2 * ph - eff_h) // stride + 1
    wo = (w + 2 * pw - eff_w) // stride + 1
    xp = np.zeros((h + 2 * ph, w + 2 * pw, cin))
    xp[ph : ph + h, pw : pw + w] = x.data
    K = kernels.data

    def window(i, j):
        r0, c0 = i * dilation, j * dilation
        return (slice(r0, r0 + stride * (ho - 1) + 1, stride), slice(c0, c0 + stride * (wo - 1) + 1, stride))

    cout = cin if depthwise else K.shape[3]
    out = np.zeros((ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            patch = xp[window(i, j)]
            if depthwise:
                out += patch * K[i, j]
            else:
                out += (patch.reshape(-1, cin) @ K[i, j]).reshape(ho, wo, cout)
    if bias is not None:
        out = out + bias.data
    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def backward(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(K) if kernels.requires_grad else None
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                win = window(i, j)
                if depthwise:
                    if gk is not None:
                        gk[i, j] = (xp[win] * g).sum(axis=(0, 1))
                    if gx is not None:
                        gx[win] += g * K[i, j]
                else:
                    if gk is not None:
                        gk[i, j] = xp[win].reshape(-1, cin).T @ g2
                    if gx is not None:
                        gx[win] += (g2 @ K[i, j].T).reshape(ho, wo, cin)
        grads = [None if gx is None else gx[ph : ph + h, pw : pw + w], gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)).reshape(bias.shape))
        return grads

    return Tensor._from_op(out, parents, backward)


# -- verification ----------------------------------------------------------
def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` is re-evaluated with every coordinate of every array in ``x``
    perturbed by +-eps.  Relative error uses ``max(|a|, |n|, 1e-8)`` as the
    denominator.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise GradError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            plus = f().item()
            flat[k] = orig - eps
            minus = f().item()
            flat[k] = orig
            num = (plus - minus) / (2.0 * eps)
            denom = max(abs(a_flat[k]), abs(num), 1e-8)
            worst = max(worst, abs(a_flat[k] - num) / denom)
    for t in inputs:
        t.grad = None
    return worst


# -- checkpoint ------------------------------------------------------------
CHECKPOINT_MAGIC = b"SEPTCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in params.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    params: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return params
