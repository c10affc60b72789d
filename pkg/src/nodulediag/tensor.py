"""Dense float64 tensors with tape-based reverse-mode differentiation.

The tape is rebuilt on every forward pass: each op that participates in
differentiation hangs a `TapeNode` off its output tensor, and `backward`
walks the recorded graph in reverse topological order. There is no graph
reuse and no hidden RNG; identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ParameterError(ValueError):
    """A numeric hyperparameter is outside its valid range."""


class UsageError(RuntimeError):
    """The autodiff API was driven in an unsupported way."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    """One recorded op: input tensors plus the local vector-Jacobian rule."""

    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs: tuple["Tensor", ...], vjp: Callable[[np.ndarray], tuple]):
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: TapeNode | None = None
        self._backward_done = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A leaf view of the same values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors: Tensor) -> bool:
    if not _grad_enabled:
        return False
    return any(t.requires_grad or t._node is not None for t in tensors)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _tracked(*inputs):
        out._node = TapeNode(inputs, vjp)
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), vjp)


def texp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _make(data, (a,), vjp)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(data, (a,), vjp)


def ttanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), vjp)


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / data,)

    return _make(data, (a,), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    data = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make(data, (a,), vjp)


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is zero where clipped."""
    a = as_tensor(a)
    data = np.maximum(a.data, floor)
    mask = a.data > floor

    def vjp(g):
        return (g * mask,)

    return _make(data, (a,), vjp)


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _make(data, (a,), vjp)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(data, (a,), vjp)


def take(a, key) -> Tensor:
    a = as_tensor(a)
    data = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(data, (a,), vjp)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make(data, (a,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(ts), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul operands must have rank >= 1")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(g @ bt, a.shape)
        gb = _unbroadcast(at @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), vjp)


# -- composite neural ops -------------------------------------------------

CROSS_ENTROPY_FLOOR = 1e-12

# tanh-form GELU constants
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def softmax(z, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """exp(z/t) normalized along `axis`, stabilized by max subtraction."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    z = as_tensor(z)
    scaled = mul(z, 1.0 / temperature)
    # subtracting the (detached) row max is exact by shift invariance
    shift = np.max(scaled.data, axis=axis, keepdims=True)
    e = texp(add(scaled, -shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def cross_entropy(p1, p2) -> Tensor:
    """-sum(p1 * log(p2)) over the last axis, with p2 floored at 1e-12.

    Both arguments must be probability vectors (each row sums to 1 within
    1e-6). Returns a scalar for vector inputs, a batch of scalars otherwise.
    """
    p1, p2 = as_tensor(p1), as_tensor(p2)
    if p1.shape[-1] != p2.shape[-1]:
        raise DimensionError(f"cross_entropy length mismatch: {p1.shape} vs {p2.shape}")
    for name, p in (("p1", p1), ("p2", p2)):
        sums = p.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ParameterError(f"cross_entropy {name} rows must sum to 1 within 1e-6")
    return mul(tsum(mul(p1, tlog(clip_min(p2, CROSS_ENTROPY_FLOOR))), axis=-1), -1.0)


def gelu(x) -> Tensor:
    """GELU in the tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = as_tensor(x)
    inner = mul(add(x, mul(power(x, 3.0), _GELU_A)), _GELU_C)
    return mul(mul(x, add(ttanh(inner), 1.0)), 0.5)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, tsqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x scaled to unit norm along `axis`; exact for any nonzero input."""
    norm = tsqrt(tsum(mul(x, x), axis=axis, keepdims=True))
    return div(x, clip_min(norm, eps))


# -- reverse pass ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad leaf reachable from `loss`."""
    if loss.data.ndim != 0:
        raise UsageError(f"backward root must be a scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise UsageError("backward was already called on this tensor; re-record the graph first")
    loss._backward_done = True

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if id(inp) not in seen and (inp._node is not None or inp.requires_grad):
                    stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t._node.inputs, t._node.vjp(g)):
            if gi is None or not (inp.requires_grad or inp._node is not None):
                continue
            gi = np.asarray(gi, dtype=np.float64)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # leaves that were never reached keep grad=None


# -- serialization --------------------------------------------------------


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Shape header (u32 rank, u32 extents) + little-endian f64 payload."""
    arr = np.asarray(arr, dtype=np.float64)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8", copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of `tensor_to_bytes`; returns (array, bytes consumed)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    pos = offset + 4
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
    pos += 8 * count
    return arr, pos - offset
