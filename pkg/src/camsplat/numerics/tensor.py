"""Float32 tensors with taped reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous float32 numpy array. Operations record
nodes onto the active :class:`GradTape` in execution order; ``backward``
walks that list in reverse, so no separate topological sort is needed.
Gradients accumulate only on leaf tensors created with
``requires_grad=True``. Nothing is recorded unless a tape is active and
at least one input carries gradient, so inference and data generation
run at plain numpy speed.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericError, ShapeError

_active_tape: Optional["GradTape"] = None


class GradTape:
    """Records operations for one backward pass.

    Use as a context manager. Only one tape may be active at a time;
    nesting is a contract error because gradients would silently leak
    between scopes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a GradTape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False


class _Node:
    __slots__ = ("out_id", "inputs", "backward_fn")

    def __init__(self, out_id: int, inputs: tuple, backward_fn: Callable):
        self.out_id = out_id
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense float32 array with optional gradient tracking.

    Data is immutable by convention once constructed; the optimizer
    mutates ``data`` in place between tape scopes, which is the one
    sanctioned exception.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tape: Optional[GradTape] = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _from_data(arr: np.ndarray) -> "Tensor":
        # Internal fast path: skips the finite check on op outputs. Models
        # re-check at block boundaries where a failure can be localized.
        t = Tensor.__new__(Tensor)
        t.data = arr if arr.dtype == np.float32 else arr.astype(np.float32)
        t.grad = None
        t.requires_grad = False
        t._tape = None
        return t

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad)

    @staticmethod
    def full(shape, value: float, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=np.float32), requires_grad)

    @staticmethod
    def randn(shape, rng: np.random.Generator, scale: float = 1.0,
              requires_grad: bool = False) -> "Tensor":
        return Tensor(rng.standard_normal(shape).astype(np.float32) * np.float32(scale),
                      requires_grad)

    @staticmethod
    def uniform(shape, rng: np.random.Generator, low: float = 0.0, high: float = 1.0,
                requires_grad: bool = False) -> "Tensor":
        return Tensor(rng.uniform(low, high, shape).astype(np.float32), requires_grad)

    # -- introspection -------------------------------------------------------

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        if self.data.ndim == 0:
            raise ShapeError("len() of a 0-d tensor")
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ------------------------------------------------------------

    def _tracked(self) -> bool:
        return self.requires_grad or self._tape is _active_tape

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``self`` must be scalar. If it was never recorded on a tape (a
        constant), this is a no-op.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = self._tape if self._tape is not None else _active_tape
        if tape is None or not tape.nodes:
            return
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if t._tape is tape:
                    prev = grads.get(id(t))
                    # out-of-place: gi may alias a view into a live buffer
                    grads[id(t)] = gi if prev is None else prev + gi
                elif t.requires_grad:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=np.float32, copy=True)
                    else:
                        t.grad = t.grad + gi

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other): return add(self, _wrap(other))
    def __radd__(self, other): return add(_wrap(other), self)
    def __sub__(self, other): return sub(self, _wrap(other))
    def __rsub__(self, other): return sub(_wrap(other), self)
    def __mul__(self, other): return mul(self, _wrap(other))
    def __rmul__(self, other): return mul(_wrap(other), self)
    def __truediv__(self, other): return div(self, _wrap(other))
    def __rtruediv__(self, other): return div(_wrap(other), self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, _wrap(other))
    def __pow__(self, p): return pow_scalar(self, float(p))

    def __getitem__(self, key): return getitem(self, key)

    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, axes): return transpose(self, axes)
    def sum(self, axis=None, keepdims: bool = False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return tmean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _record(out: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    if _active_tape is not None and any(t._tracked() for t in inputs):
        out._tape = _active_tape
        _active_tape.nodes.append(_Node(id(out), inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` reversing numpy trailing-dim broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def no_tape_active() -> bool:
    return _active_tape is None


class suspend_tape:
    """Temporarily disable recording (finite differences re-run the forward
    function many times and must not pollute the caller's tape)."""

    def __enter__(self):
        global _active_tape
        self._saved = _active_tape
        _active_tape = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = self._saved
        return False


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._from_data(a.data + b.data)
    def bw(g):
        return (_unbroadcast(g, a.data.shape) if a._tracked() else None,
                _unbroadcast(g, b.data.shape) if b._tracked() else None)
    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._from_data(a.data - b.data)
    def bw(g):
        return (_unbroadcast(g, a.data.shape) if a._tracked() else None,
                _unbroadcast(-g, b.data.shape) if b._tracked() else None)
    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._from_data(a.data * b.data)
    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a._tracked() else None,
                _unbroadcast(g * a.data, b.data.shape) if b._tracked() else None)
    return _record(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._from_data(a.data / b.data)
    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a._tracked() else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b._tracked() else None
        return (ga, gb)
    return _record(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    out = Tensor._from_data(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = Tensor._from_data(a.data ** np.float32(p))
    def bw(g):
        return (g * np.float32(p) * a.data ** np.float32(p - 1.0),)
    return _record(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = Tensor._from_data(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor._from_data(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def log1p(a: Tensor) -> Tensor:
    out = Tensor._from_data(np.log1p(a.data))
    return _record(out, (a,), lambda g: (g / (1.0 + a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor._from_data(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * (0.5 / out.data),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # both branches evaluate fully under np.where; silence the tail overflow
    # and the inf/inf it produces in the branch not selected
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    return s.astype(np.float32)


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor._from_data(_stable_sigmoid(a.data))
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the smooth nonlinearity used throughout."""
    x = a.data
    s = _stable_sigmoid(x)
    out = Tensor._from_data(x * s)
    def bw(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)
    return _record(out, (a,), bw)


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    if lo is None and hi is None:
        raise ContractError("clamp needs at least one bound")
    out = Tensor._from_data(np.clip(a.data, lo, hi))
    def bw(g):
        mask = np.ones_like(a.data)
        if lo is not None:
            mask *= (a.data >= lo)
        if hi is not None:
            mask *= (a.data <= hi)
        return (g * mask,)
    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor._from_data(a.data.reshape(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}: {e}") from None
    src = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {a.ndim}")
    out = Tensor._from_data(np.ascontiguousarray(a.data.transpose(axes)))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor._from_data(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    src = a.data.shape
    return _record(out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ContractError("concat of an empty sequence")
    out = Tensor._from_data(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t._tracked() else None for p, t in zip(parts, ts))
    return _record(out, tuple(ts), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ContractError("stack of an empty sequence")
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints, slices, tuples thereof) with scatter backward."""
    sub = a.data[key]
    out = Tensor._from_data(np.ascontiguousarray(sub))
    src_shape = a.data.shape
    def bw(g):
        full = np.zeros(src_shape, dtype=np.float32)
        full[key] = g.reshape(sub.shape)
        return (full,)
    return _record(out, (a,), bw)


def gather0(a: Tensor, idx: np.ndarray) -> Tensor:
    """Take rows ``a[idx]`` along axis 0; duplicate indices allowed.

    Backward scatter-adds, so repeated rows accumulate gradient.
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError(f"gather0 index out of range for axis of length {a.data.shape[0]}")
    out = Tensor._from_data(np.ascontiguousarray(a.data[idx]))
    src_shape = a.data.shape
    def bw(g):
        if idx.ndim == 1 and g.ndim <= 2:
            # bincount is much faster than np.add.at for the rasterizer's
            # million-pair scatters
            n = src_shape[0]
            if g.ndim == 1:
                return (np.bincount(idx, weights=g, minlength=n).astype(np.float32),)
            cols = [np.bincount(idx, weights=g[:, j], minlength=n)
                    for j in range(g.shape[1])]
            return (np.stack(cols, axis=1).astype(np.float32),)
        full = np.zeros(src_shape, dtype=np.float32)
        np.add.at(full, idx, g)
        return (full,)
    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._from_data(a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32))
    src_shape = a.data.shape
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * len(src_shape)), src_shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(src_shape) for ax in axes)
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, src_shape),)
    return _record(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis, keepdims), Tensor(np.float32(1.0 / n)))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor._from_data(a.data @ b.data)
    def bw(g):
        ga = gb = None
        if a._tracked():
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b._tracked():
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return (ga, gb)
    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# fused neural-net ops
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)
    out = Tensor._from_data(y)
    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)
    return _record(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = (xc * inv).astype(np.float32)
    out = Tensor._from_data(xhat * gamma.data + beta.data)
    def bw(g):
        gx = gg = gb = None
        gxhat = g * gamma.data
        if x._tracked():
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = (gxhat - m1 - xhat * m2) * inv
        if gamma._tracked():
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta._tracked():
            gb = g.reshape(-1, d).sum(axis=0)
        return (gx, gg, gb)
    return _record(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# sorted-segment ops (rasterizer compositing)
# ---------------------------------------------------------------------------

def _check_starts(starts: np.ndarray, n: int) -> np.ndarray:
    starts = np.asarray(starts, dtype=np.int64)
    if starts.size == 0 or starts[0] != 0 or (starts.size > 1 and np.any(np.diff(starts) <= 0)):
        raise ContractError("segment starts must begin at 0 and strictly increase")
    if starts[-1] >= n and n > 0:
        raise ContractError("last segment start past end of data")
    return starts


def segment_sum(a: Tensor, starts: np.ndarray) -> Tensor:
    """Sum contiguous runs of rows. ``starts[k]`` begins segment k; every
    segment is nonempty and covers axis 0 completely."""
    n = a.data.shape[0]
    starts = _check_starts(starts, n)
    counts = np.diff(np.append(starts, n))
    acc = np.add.reduceat(a.data.astype(np.float64), starts, axis=0)
    out = Tensor._from_data(acc.astype(np.float32))
    def bw(g):
        return (np.repeat(g, counts, axis=0),)
    return _record(out, (a,), bw)


def segment_cumsum_excl(a: Tensor, starts: np.ndarray) -> Tensor:
    """Per-segment exclusive prefix sum along axis 0 of a 1-d tensor."""
    if a.ndim != 1:
        raise ShapeError("segment_cumsum_excl expects a 1-d tensor")
    n = a.data.shape[0]
    starts = _check_starts(starts, n)
    seg_of = np.zeros(n, dtype=np.int64)
    seg_of[starts[1:]] = 1
    seg_of = np.cumsum(seg_of)
    # float64 running sum keeps the within-segment differences exact enough
    c = np.cumsum(a.data, dtype=np.float64)
    base = np.concatenate(([0.0], c))[starts]  # inclusive sum before each segment
    excl = np.concatenate(([0.0], c))[:-1] - base[seg_of]
    out = Tensor._from_data(excl.astype(np.float32))
    def bw(g):
        # d excl[i] / d a[j] = 1 for j < i within the same segment
        gc = np.cumsum(g.astype(np.float64))
        seg_end_incl = np.append(gc[starts[1:] - 1], gc[-1])
        total_after = seg_end_incl[seg_of] - gc
        return (total_after.astype(np.float32),)
    return _record(out, (a,), bw)


def scatter_rows(src: Tensor, idx: np.ndarray, size: int, fill: float = 0.0) -> Tensor:
    """Place row k of ``src`` at position ``idx[k]`` of a fresh array of
    ``size`` rows filled with ``fill``. Indices must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size != src.data.shape[0]:
        raise ShapeError("scatter_rows needs one index per source row")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ContractError("scatter_rows index out of range")
    out_arr = np.full((size,) + src.data.shape[1:], fill, dtype=np.float32)
    out_arr[idx] = src.data
    out = Tensor._from_data(out_arr)
    def bw(g):
        return (np.ascontiguousarray(g[idx]),)
    return _record(out, (src,), bw)


# ---------------------------------------------------------------------------
# misc
# ---------------------------------------------------------------------------

def assert_finite(a: Tensor, what: str) -> Tensor:
    """Raise NumericError naming ``what`` if any element is NaN or Inf."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError(f"non-finite values in {what}")
    return a


def make_rng(seed: int) -> np.random.Generator:
    """The single sanctioned RNG constructor; same seed, same stream."""
    return np.random.default_rng(int(seed))
