"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a new :class:`Tensor` that remembers its parents and a
backward closure.  :func:`backward` linearises the graph reachable from a
scalar loss into a :class:`Tape` (topological order) and replays it in
reverse, accumulating ``grad`` on every tensor that requires it.

Storage is a plain row-major numpy array.  Precision is chosen per run
(float32 by default, float64 for gradient checks) through
:func:`precision`; ops keep the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "DimensionError",
    "tensor", "zeros", "ones", "precision", "no_grad", "get_dtype", "set_default_precision",
    "matmul", "softmax_rows", "softmax", "concat", "backward", "build_tape",
    "add", "sub", "mul", "scale", "neg", "gelu", "layer_norm", "mean", "sum_all",
    "cross_entropy", "transpose", "reshape", "slice_rows", "take", "broadcast_to",
    "trunc_normal", "he_normal", "make_rng",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces or receives NaN/Inf values."""


class DimensionError(ValueError):
    pass


_DTYPES = {32: np.float32, 64: np.float64}
_state = threading.local()


def get_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def set_default_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state.dtype = _DTYPES[bits]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float width for newly created tensors."""
    old = get_dtype()
    set_default_precision(bits)
    try:
        yield
    finally:
        _state.dtype = old


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf",
                 dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                              and data.dtype in (np.float32, np.float64)
                                              else get_dtype()))
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, op)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or get_dtype()), requires_grad=requires_grad,
                  name=name, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or get_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or get_dtype()), requires_grad=requires_grad)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation passes)."""
    old = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = old


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = not getattr(_state, "no_grad", False) and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=False, op=op, dtype=data.dtype)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.grad = None  # allocated lazily during backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))
    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))
    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))
    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def bw(g):
        _accum(a, g * c)
    return _result(a.data * c, (a,), bw, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (cdf + x * pdf))
    return _result((x * cdf).astype(x.dtype, copy=False), (a,), bw, "gelu")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _result(out, (a, b), bw, "matmul")


def softmax(x: Tensor, keep: np.ndarray | None = None, weight: Tensor | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max.

    ``keep`` is an optional constant boolean array broadcastable to ``x``.
    Entries where it is False get probability exactly 0 and take no part in
    the row max or normaliser, so their logits cannot influence the result.

    ``weight`` is an optional non-negative tensor broadcastable to ``x``;
    entry j is then proportional to ``weight_j * exp(x_j)``.  A weight of 0
    drops the entry, a weight of 1 leaves it as in the plain softmax, and
    gradients flow to the weight.
    """
    if np.isnan(x.data).any():
        raise NonFiniteError("softmax received NaN input")
    z = x.data
    if keep is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = np.broadcast_to(keep, z.shape)
        masked = np.where(keep, z, -np.inf)
        row_max = masked.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.where(keep, np.exp(np.where(keep, z - row_max, 0.0)), 0.0)
    if weight is None:
        y = (e / e.sum(axis=-1, keepdims=True)).astype(z.dtype, copy=False)

        def bw(g):
            _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
        return _result(y, (x,), bw, "softmax")

    weight = _lift(weight, x)
    norm = (e * weight.data).sum(axis=-1, keepdims=True)
    y = (e * weight.data / norm).astype(z.dtype, copy=False)

    def bw_weighted(g):
        centred = g - (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * centred)
        _accum(weight, _unbroadcast(e / norm * centred, weight.shape))
    return _result(y, (x, weight), bw_weighted, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x)


# ---------------------------------------------------------------- shape ops

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat shape mismatch along axis {axis}: "
                                 f"{[tuple(u.shape) for u in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accum(t, g[tuple(idx)])
    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))
    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc

    def bw(g):
        _accum(a, g.reshape(a.shape))
    return _result(out, (a,), bw, "reshape")


def slice_rows(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)
    return _result(np.ascontiguousarray(a.data[idx]), (a,), bw, "slice")


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select a single index along ``axis`` (the axis is dropped)."""
    idx = [slice(None)] * a.ndim
    idx[axis] = index
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)
    return _result(np.ascontiguousarray(a.data[idx]), (a,), bw, "take")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
    return _result(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), bw, "broadcast")


# ---------------------------------------------------------------- reductions / losses

def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape))
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size

        def bw(g):
            _accum(a, np.broadcast_to(g / n, a.shape))
        return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bw, "mean")
    n = a.shape[axis]

    def bw_axis(g):
        _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.shape))
    return _result(a.data.mean(axis=axis), (a,), bw_axis, "mean")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply an elementwise affine map."""
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    d = z.shape[-1]

    def bw(g):
        if weight.requires_grad:
            _accum(weight, _unbroadcast(g * xhat, weight.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * weight.data
            _accum(x, inv / d * (d * gx - gx.sum(-1, keepdims=True)
                                  - xhat * (gx * xhat).sum(-1, keepdims=True)))
    return _result(out.astype(z.dtype, copy=False), (x, weight, bias), bw, "layer_norm")


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy for a ``(batch, classes)`` logit matrix."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    losses = -logp[rows, labels]
    if reduction == "mean":
        value, factor = losses.mean(), 1.0 / z.shape[0]
    elif reduction == "sum":
        value, factor = losses.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _accum(logits, p * (g * factor))
    return _result(np.asarray(value, dtype=z.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- backward

class Tape:
    """Operations reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def build_tape(root: Tensor) -> Tape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Tape(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable trainable tensor."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    seed = np.ones_like(loss.data)
    if loss._backward is None:  # loss is itself a leaf
        loss.grad = loss.grad + seed
        return
    loss.grad = seed
    for node in reversed(tape.nodes):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        # interior buffers are not needed after their rule has run
        node.grad = None


# ---------------------------------------------------------------- initialisation

def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Counter-based (Philox) generator; identical seeds give identical streams."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0,
                 dtype=None) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside ±bound·std."""
    shape = tuple(shape)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype or get_dtype())


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    return (rng.standard_normal(tuple(shape)) * math.sqrt(2.0 / fan_in)).astype(dtype or get_dtype())


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
