"""A small reverse-mode autodiff engine over dense numpy arrays.

Every differentiable operation creates a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
Nodes carry a global creation counter; :meth:`Tensor.backward` visits the
ancestors of the loss in decreasing counter order, i.e. reverse execution
order, each exactly once.

Shapes are strict. Binary elementwise operations require identical shapes;
use :func:`expand` to repeat a size-1 axis explicitly.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_seq = itertools.count()
_local = threading.local()
_default_dtype = np.float64

#: name -> op, the set exercised by the gradient suite
OPS: dict[str, Callable] = {}


def _register(fn):
    OPS[fn.__name__] = fn
    return fn


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction on the current thread."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if not np.isfinite(arr).all():
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq)
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if not np.isfinite(data).all():
            raise NumericError(f"{op} produced NaN or Inf")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._seq = next(_seq)
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), None, "detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1 or self.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not on the tape (no input requires grad)")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------
@_register
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


@_register
def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


@_register
def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


@_register
def neg(x: Tensor) -> Tensor:
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


@_register
def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant (e.g. ``1/tau``)."""
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "scale")


@_register
def add_scalar(x: Tensor, c: float) -> Tensor:
    return Tensor._result(x.data + c, (x,), lambda g: (g,), "add_scalar")


@_register
def one_minus(x: Tensor) -> Tensor:
    return Tensor._result(1.0 - x.data, (x,), lambda g: (-g,), "one_minus")


@_register
def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,), "exp")


@_register
def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,), "log")


@_register
def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; clamped entries receive no gradient."""
    keep = x.data >= floor
    return Tensor._result(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@_register
def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


@_register
def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


@_register
def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._result(y, (x,), backward, "gelu")


@_register
def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_fill: mask {mask.shape} vs {x.shape}")
    keep = ~mask
    return Tensor._result(np.where(mask, value, x.data), (x,), lambda g: (g * keep,), "masked_fill")


# -- shape ---------------------------------------------------------------------
@_register
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._result(y, (x,), lambda g: (g.reshape(src),), "reshape")


@_register
def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return Tensor._result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


@_register
def expand(x: Tensor, shape) -> Tensor:
    """Repeat size-1 axes to ``shape``; ranks must agree."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != d and s != 1 for s, d in zip(x.shape, shape)):
        raise DimensionError(f"expand: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, d) in enumerate(zip(x.shape, shape)) if s != d)
    y = np.broadcast_to(x.data, shape).copy()
    return Tensor._result(y, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def expand_rows(v: Tensor, n: int) -> Tensor:
    """[d] -> [n, d]"""
    return expand(reshape(v, (1,) + v.shape), (n,) + v.shape)


@_register
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


@_register
def getitem(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing (slices, row gathers)."""
    src_shape = x.shape

    def backward(g):
        out = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(out, key, g)
        return (out,)

    return Tensor._result(np.array(x.data[key]), (x,), backward, "getitem")


slice_ = getitem


# -- reductions ----------------------------------------------------------------
@_register
def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src_shape = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape).copy(),)

    return Tensor._result(np.asarray(y), (x,), backward, "sum")


@_register
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


@_register
def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry only."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis)
    src_shape = x.shape

    def backward(g):
        out = np.zeros(src_shape, dtype=g.dtype)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return Tensor._result(np.squeeze(y, axis=axis), (x,), backward, "max_over_axis")


# -- linear algebra ------------------------------------------------------------
@_register
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched product with identical leading dimensions."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


# -- normalisers ---------------------------------------------------------------
def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@_register
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for {x.shape}")
    y = _softmax_np(x.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), backward, "softmax")


@_register
def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), backward, "log_softmax")


@_register
def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    # rounding in the mean must not leak through for constant rows
    xc = np.where(np.ptp(xd, axis=-1, keepdims=True) == 0, 0.0, xc)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._result(xhat, (x,), backward, "layer_norm")


@_register
def cross_entropy_nll(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_nll: logits {logits.shape}, targets {targets.shape}")
    n, v = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy_nll: no targets")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return Tensor._result(np.asarray(loss), (logits,), backward, "cross_entropy_nll")


def token_nll(logits: np.ndarray, targets) -> np.ndarray:
    """Per-row negative log-probabilities (plain numpy, no graph)."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(targets)), targets]
