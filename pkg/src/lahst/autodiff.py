"""Dense float64 arrays with tape-based reverse-mode differentiation.

Everything the sequence model needs is built from the primitives here:
broadcast-aware matmul / add / mul, a masked softmax driven by an additive
attention mask, pointwise nonlinearities, bag-of-rows embedding lookups and
a binary cross-entropy reduction. Recording happens on an explicit
:class:`Tape`; with no tape active the same ops run as plain (and cheaper)
forward computations, which is how inference works.

A tape is confined to one thread. Independent tapes on different threads
may run concurrently; there is no shared mutable state between them.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np
from scipy.special import erf, expit

NEG_INF = np.finfo(np.float64).min
"""Additive-mask sentinel: most-negative finite float64, so that
``score + sentinel`` never produces NaN the way ``-inf - (-inf)`` would."""

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_node_ids = itertools.count()
_local = threading.local()


class DimensionError(ValueError):
    """Incompatible shapes fed to an array operation."""


class MaskError(ValueError):
    """Attention mask with illegal entries or a fully masked row."""


class TapeError(RuntimeError):
    """Tape misuse: non-scalar backward, or reuse without reset."""


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class DiffArray:
    """Dense float64 array participating in reverse-mode differentiation.

    ``data`` is a row-major float64 ndarray; ``grad`` stays ``None`` until a
    backward pass deposits into it. ``node_id`` identifies the array within
    a recorded computation.
    """

    __slots__ = ("data", "grad", "trainable", "name", "node_id")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.name = name
        self.node_id = next(_node_ids)

    @classmethod
    def param(cls, data, name: str | None = None) -> "DiffArray":
        return cls(data, trainable=True, name=name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "DiffArray":
        return DiffArray(self.data.copy(), trainable=self.trainable, name=self.name)

    def __repr__(self) -> str:
        tag = self.name or f"node{self.node_id}"
        return f"DiffArray({tag}, shape={self.shape}, trainable={self.trainable})"

    # operator sugar; all routing through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


class Tape:
    """Records operations for one backward pass.

    Use as a context manager around the forward computation; call
    :meth:`backward` on the scalar loss. A consumed tape must be
    :meth:`reset` before it can record and differentiate again.
    """

    def __init__(self):
        self._nodes: list = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: DiffArray) -> None:
        """Populate ``grad`` on every array the scalar ``loss`` depends on."""
        if self._spent:
            raise TapeError("tape already consumed; call reset() before reuse")
        if not isinstance(loss, DiffArray) or loss.size != 1:
            got = getattr(loss, "shape", type(loss).__name__)
            raise TapeError(f"backward requires a scalar loss, got {got}")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)

    def reset(self) -> None:
        self._nodes.clear()
        self._spent = False


def _record(out: DiffArray, backward_fn) -> None:
    tape = _active_tape()
    if tape is not None:
        tape._nodes.append((out, backward_fn))


def _accum(arr: DiffArray, g: np.ndarray) -> None:
    if arr.grad is None:
        arr.grad = np.zeros_like(arr.data)
    arr.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: DiffArray, b: DiffArray, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = _as_diff(a), _as_diff(b)
    _broadcast_shape(a, b, "add")
    out = DiffArray(a.data + b.data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def sub(a, b) -> DiffArray:
    a, b = _as_diff(a), _as_diff(b)
    _broadcast_shape(a, b, "sub")
    out = DiffArray(a.data - b.data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    _record(out, backward)
    return out


def mul(a, b) -> DiffArray:
    a, b = _as_diff(a), _as_diff(b)
    _broadcast_shape(a, b, "mul")
    out = DiffArray(a.data * b.data)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    _record(out, backward)
    return out


def scale(a, c: float) -> DiffArray:
    a = _as_diff(a)
    c = float(c)
    out = DiffArray(a.data * c)

    def backward(g):
        _accum(a, g * c)

    _record(out, backward)
    return out


def add_scalar(a, c: float) -> DiffArray:
    a = _as_diff(a)
    out = DiffArray(a.data + float(c))

    def backward(g):
        _accum(a, g)

    _record(out, backward)
    return out


def power(a, p: float) -> DiffArray:
    a = _as_diff(a)
    p = float(p)
    out = DiffArray(a.data**p)

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    _record(out, backward)
    return out


def matmul(a, b) -> DiffArray:
    """Matrix product with numpy stack broadcasting; gradient to both inputs."""
    a, b = _as_diff(a), _as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul expects stacks of matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = DiffArray(a.data @ b.data)

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    _record(out, backward)
    return out


def transpose_last(a) -> DiffArray:
    a = _as_diff(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose_last needs ndim >= 2, got shape {a.shape}")
    out = DiffArray(np.swapaxes(a.data, -1, -2))

    def backward(g):
        _accum(a, np.swapaxes(g, -1, -2))

    _record(out, backward)
    return out


def sum_(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = _as_diff(a)
    out = DiffArray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None or keepdims:
            gg = g
        else:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    _record(out, backward)
    return out


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = _as_diff(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(parts, axis: int = 0) -> DiffArray:
    parts = [_as_diff(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero arrays")
    out = DiffArray(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, s in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + s)
            _accum(p, g[tuple(index)])
            offset += s

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def sigmoid(a) -> DiffArray:
    """Elementwise 1/(1+exp(-x)), evaluated overflow-free; gradient p(1-p)."""
    a = _as_diff(a)
    out = DiffArray(expit(a.data))

    def backward(g):
        _accum(a, g * out.data * (1.0 - out.data))

    _record(out, backward)
    return out


def tanh(a) -> DiffArray:
    a = _as_diff(a)
    out = DiffArray(np.tanh(a.data))

    def backward(g):
        _accum(a, g * (1.0 - out.data * out.data))

    _record(out, backward)
    return out


def gelu(a) -> DiffArray:
    """Exact erf-based GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_diff(a)
    e = erf(a.data * _INV_SQRT2)
    out = DiffArray(0.5 * a.data * (1.0 + e))

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _accum(a, g * (0.5 * (1.0 + e) + a.data * pdf))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# attention mask + masked softmax
# ---------------------------------------------------------------------------


class AttentionMask:
    """Additive attention bias with entries in {0, NEG_INF sentinel}.

    Rows (along the last axis) must each keep at least one live entry, so a
    softmax over any row is well defined.
    """

    __slots__ = ("values", "live")

    def __init__(self, values):
        v = np.ascontiguousarray(values, dtype=np.float64)
        if v.ndim == 0:
            raise MaskError("attention mask must be at least 1-D")
        live = v == 0.0
        if not np.all(live | (v == NEG_INF)):
            raise MaskError("mask entries must be 0 or the -inf sentinel")
        if v.shape[-1] == 0 or not live.any(axis=-1).all():
            raise MaskError("attention mask contains a fully masked row")
        self.values = v
        self.live = live

    @classmethod
    def from_live(cls, live) -> "AttentionMask":
        live = np.asarray(live, dtype=bool)
        return cls(np.where(live, 0.0, NEG_INF))

    @classmethod
    def causal(cls, n: int) -> "AttentionMask":
        """Lower-triangular mask: position i may attend to positions <= i."""
        return cls.from_live(np.tril(np.ones((n, n), dtype=bool)))

    @property
    def shape(self) -> tuple:
        return self.values.shape


def masked_softmax(scores, mask: AttentionMask | None = None) -> DiffArray:
    """Row softmax over the last axis with masked positions pinned to 0.

    Stabilized by subtracting the row max over live entries only; masked
    entries contribute exact zeros to both the output and the gradient.
    """
    scores = _as_diff(scores)
    s = scores.data
    if mask is None:
        live = None
        out_shape = s.shape
    else:
        if mask.shape[-1] != s.shape[-1]:
            raise DimensionError(
                f"masked_softmax: scores {s.shape} and mask {mask.shape} "
                "disagree on the last dimension"
            )
        try:
            out_shape = np.broadcast_shapes(s.shape, mask.shape)
        except ValueError:
            raise DimensionError(
                f"masked_softmax: scores {s.shape} and mask {mask.shape} "
                "do not broadcast"
            ) from None
        live = np.broadcast_to(mask.live, out_shape)
        s = np.broadcast_to(s, out_shape)

    if live is None:
        shifted = s - s.max(axis=-1, keepdims=True)
    else:
        if not live.any(axis=-1).all():
            raise MaskError("masked_softmax: fully masked row")
        row_max = np.max(np.where(live, s, -np.inf), axis=-1, keepdims=True)
        shifted = np.where(live, s - row_max, -np.inf)
    z = np.exp(shifted)
    out = DiffArray(z / z.sum(axis=-1, keepdims=True))

    def backward(g):
        inner = (g * out.data).sum(axis=-1, keepdims=True)
        _accum(scores, _unbroadcast(out.data * (g - inner), scores.shape))

    _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# losses and lookups
# ---------------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(p, y, eps: float = BCE_EPS) -> DiffArray:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets.

    Probabilities are clamped to [eps, 1-eps]; the gradient is evaluated at
    the clamped value and passed through, so saturated predictions keep a
    restoring gradient.
    """
    p = _as_diff(p)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(
            f"bce_loss: probabilities {p.shape} and targets {y.shape} differ"
        )
    pc = np.clip(p.data, eps, 1.0 - eps)
    value = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean()
    out = DiffArray(value)
    n = max(y.size, 1)

    def backward(g):
        _accum(p, g * (pc - y) / (pc * (1.0 - pc)) / n)

    _record(out, backward)
    return out


def bag_mean(table, bags) -> DiffArray:
    """Per-bag mean of table rows: output[i] = mean(table[bags[i]]).

    ``bags`` is a sequence of non-empty integer index arrays. The gradient
    scatters g/len(bag) back into the indexed rows.
    """
    table = _as_diff(table)
    idx = [np.asarray(b, dtype=np.int64) for b in bags]
    for i, b in enumerate(idx):
        if b.size == 0:
            raise DimensionError(f"bag_mean: bag {i} is empty")
    if idx:
        out_data = np.stack([table.data[b].mean(axis=0) for b in idx])
    else:
        out_data = np.zeros((0,) + table.shape[1:])
    out = DiffArray(out_data)

    def backward(g):
        gt = np.zeros_like(table.data)
        for row, b in enumerate(idx):
            np.add.at(gt, b, g[row] / b.size)
        _accum(table, gt)

    _record(out, backward)
    return out


def take_rows(table, indices) -> DiffArray:
    table = _as_diff(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = DiffArray(table.data[idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    _record(out, backward)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> DiffArray:
    """Normalize over the last axis, then apply gain and bias.

    Composed from recorded primitives, so the gradient needs no bespoke
    derivation.
    """
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add_scalar(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)
