"""Tape-style reverse-mode automatic differentiation over numpy arrays.

Every primitive's backward rule is itself written with primitives, so the
gradient of a graph can be recorded as another graph (``create_graph=True``).
That is what the exact one-step unrolled hypergradient needs.
"""
from __future__ import annotations

import contextlib
import hashlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError, ShapeError, UsageError

DEFAULT_DTYPE = np.float64

_grad_enabled = True
_node_counter = itertools.count()
_branch_log: list[bytes] | None = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def track_branches():
    """Collect a fingerprint of every piecewise branch decision taken inside the block.

    Yields the list the fingerprints are appended to. Used by gradcheck to tell
    when a finite-difference stencil straddles a kink (ReLU at 0, |x| at 0, ...).
    """
    global _branch_log
    prev = _branch_log
    log: list[bytes] = []
    _branch_log = log
    try:
        yield log
    finally:
        _branch_log = prev


def record_branch(mask: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(hashlib.blake2b(np.packbits(mask).tobytes(), digest_size=16).digest())


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """n-d float array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._fn: Function | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    def __radd__(self, other):
        return Add.apply(_lift(other, self), self)

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    def __rmul__(self, other):
        return Mul.apply(_lift(other, self), self)

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise UsageError("only constant exponents are supported")
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def relu(self):
        return Relu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def abs(self):
        return Abs.apply(self)

    def square(self):
        return Pow.apply(self, exponent=2.0)

    def clip(self, lo: float, hi: float):
        return Clip.apply(self, lo=lo, hi=hi)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axes=_norm_axes(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        axes = _norm_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axes, keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(int(s) for s in shape))

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return Transpose.apply(self, perm=tuple(perm))

    def expand(self, shape):
        return Expand.apply(self, shape=tuple(shape))

    def sum_to(self, shape):
        """Sum over the axes where ``shape`` has extent 1 (inverse of expand)."""
        shape = tuple(shape)
        if shape == self.shape:
            return self
        axes = tuple(i for i, (a, b) in enumerate(zip(self.shape, shape)) if b == 1 and a != 1)
        return Sum.apply(self, axes=axes, keepdims=True)

    def __getitem__(self, index):
        if not isinstance(index, tuple):
            index = (index,)
        if not all(isinstance(i, slice) for i in index):
            raise UsageError("only slice indexing is differentiable")
        return Slice.apply(self, index=index)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single element, tensor has shape {t.shape}")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} invalid for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like.dtype)
    if arr.ndim == 0:
        arr = arr.reshape((1,) * like.ndim)
    return Tensor(arr)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if len(a) != len(b):
        raise ShapeError(f"{op}: rank mismatch {a} vs {b} (no implicit rank promotion)")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


class Function:
    """A recorded primitive. ``forward`` works on arrays, ``backward`` on Tensors."""

    __slots__ = ("inputs", "needs", "index", "saved", "out_id", "released")

    # Ops that only move, select or squash values cannot create inf/nan.
    checked = True

    def __init__(self):
        self.inputs: tuple[Tensor, ...] = ()
        self.needs: tuple[bool, ...] = ()
        self.index = -1
        self.saved: dict = {}
        self.out_id = 0
        self.released = False

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls()
        if cls.checked:
            # non-finite results surface as NumericError instead of warnings
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                data = fn.forward(*(t.data for t in inputs), **kwargs)
            _check_finite(data, cls.__name__)
        else:
            data = fn.forward(*(t.data for t in inputs), **kwargs)
        out = Tensor(data, dtype=data.dtype)
        if _grad_enabled and any(t.requires_grad for t in inputs):
            fn.inputs = inputs
            fn.needs = tuple(t.requires_grad for t in inputs)
            fn.index = next(_node_counter)
            fn.out_id = id(out)
            out.requires_grad = True
            out._fn = fn
        return out

    def forward(self, *arrays, **kwargs) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Sequence[Tensor | None]:  # pragma: no cover - abstract
        raise NotImplementedError


def _const(arr: np.ndarray) -> Tensor:
    return Tensor(arr, dtype=arr.dtype)


# ---------------------------------------------------------------- binary
class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "add")
        self.saved = {"sa": a.shape, "sb": b.shape}
        return a + b

    def backward(self, g):
        return g.sum_to(self.saved["sa"]), g.sum_to(self.saved["sb"])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "sub")
        self.saved = {"sa": a.shape, "sb": b.shape}
        return a - b

    def backward(self, g):
        gb = (-g).sum_to(self.saved["sb"]) if self.needs[1] else None
        return g.sum_to(self.saved["sa"]), gb


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "mul")
        self.saved = {"sa": a.shape, "sb": b.shape}
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = (g * b).sum_to(self.saved["sa"]) if self.needs[0] else None
        gb = (g * a).sum_to(self.saved["sb"]) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "div")
        if np.any(b == 0):
            raise NumericError("division by zero")
        self.saved = {"sa": a.shape, "sb": b.shape}
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = (g / b).sum_to(self.saved["sa"]) if self.needs[0] else None
        gb = (-(g * a) / (b * b)).sum_to(self.saved["sb"]) if self.needs[1] else None
        return ga, gb


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = g @ b.transpose(1, 0) if self.needs[0] else None
        gb = a.transpose(1, 0) @ g if self.needs[1] else None
        return ga, gb


# ----------------------------------------------------------------- unary
class Neg(Function):
    checked = False

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Exp(Function):
    def forward(self, a):
        out = np.exp(a)
        self.saved = {"out": out}
        return out

    def backward(self, g):
        out = self.inputs[0].exp() if _grad_enabled else _const(self.saved["out"])
        return (g * out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise NumericError("log of non-positive value")
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class Pow(Function):
    def forward(self, a, exponent):
        self.saved = {"p": exponent}
        if exponent < 0 and np.any(a == 0):
            raise NumericError("negative power of zero")
        return a**exponent

    def backward(self, g):
        p = self.saved["p"]
        x = self.inputs[0]
        if p == 2.0:
            return (g * x * 2.0,)
        if p == 1.0:
            return (g,)
        return (g * (x ** (p - 1.0)) * p,)


class Abs(Function):
    checked = False

    def forward(self, a):
        sign = np.sign(a)
        record_branch(a >= 0)
        self.saved = {"sign": sign}
        return np.abs(a)

    def backward(self, g):
        return (g * _const(self.saved["sign"]),)


class Relu(Function):
    checked = False

    def forward(self, a):
        mask = a > 0
        record_branch(mask)
        self.saved = {"mask": mask}
        return np.where(mask, a, 0.0).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * _const(self.saved["mask"].astype(g.dtype)),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Sigmoid(Function):
    checked = False

    def forward(self, a):
        out = _sigmoid(a)
        self.saved = {"out": out}
        return out

    def backward(self, g):
        s = self.inputs[0].sigmoid() if _grad_enabled else _const(self.saved["out"])
        return (g * s * (1.0 - s),)


class Clip(Function):
    checked = False

    def forward(self, a, lo, hi):
        inside = (a >= lo) & (a <= hi)
        record_branch(inside)
        self.saved = {"inside": inside}
        return np.clip(a, lo, hi)

    def backward(self, g):
        return (g * _const(self.saved["inside"].astype(g.dtype)),)


# ------------------------------------------------------------ structural
class Sum(Function):
    def forward(self, a, axes, keepdims):
        self.saved = {"shape": a.shape, "axes": axes, "keepdims": keepdims}
        return np.asarray(a.sum(axis=axes, keepdims=keepdims))

    def backward(self, g):
        shape, axes, keepdims = self.saved["shape"], self.saved["axes"], self.saved["keepdims"]
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = g.reshape(kshape)
        return (g.expand(shape),)


class Expand(Function):
    checked = False

    def forward(self, a, shape):
        if len(shape) != a.ndim or any(x != y and x != 1 for x, y in zip(a.shape, shape)):
            raise ShapeError(f"cannot expand {a.shape} to {shape}")
        self.saved = {"shape": a.shape}
        return np.broadcast_to(a, shape)

    def backward(self, g):
        return (g.sum_to(self.saved["shape"]),)


class Reshape(Function):
    checked = False

    def forward(self, a, shape):
        self.saved = {"shape": a.shape}
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    def backward(self, g):
        return (g.reshape(self.saved["shape"]),)


class Transpose(Function):
    checked = False

    def forward(self, a, perm):
        self.saved = {"perm": perm}
        return a.transpose(perm)

    def backward(self, g):
        inv = tuple(np.argsort(self.saved["perm"]))
        return (g.transpose(inv),)


class Slice(Function):
    checked = False

    def forward(self, a, index):
        self.saved = {"shape": a.shape, "index": index}
        return a[index]

    def backward(self, g):
        return (Scatter.apply(g, shape=self.saved["shape"], index=self.saved["index"]),)


class Scatter(Function):
    """Place ``a`` at ``index`` inside a zero array of ``shape`` (adjoint of Slice)."""

    checked = False

    def forward(self, a, shape, index):
        self.saved = {"index": index}
        out = np.zeros(shape, dtype=a.dtype)
        out[index] = a
        return out

    def backward(self, g):
        return (g[self.saved["index"]],)


class Concat(Function):
    checked = False

    def forward(self, *arrays, axis):
        self.saved = {"axis": axis, "sizes": [a.shape[axis] for a in arrays], "ndim": arrays[0].ndim}
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        axis, ndim = self.saved["axis"], self.saved["ndim"]
        out, start = [], 0
        for need, size in zip(self.needs, self.saved["sizes"]):
            if need:
                index = tuple(slice(start, start + size) if d == axis else slice(None) for d in range(ndim))
                out.append(g[index])
            else:
                out.append(None)
            start += size
        return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 1:
        return tensors[0]
    return Concat.apply(*tensors, axis=axis % tensors[0].ndim)

class Im2Col(Function):
    """Unfold k×k patches of an N×C×H×W array into rows (N·Ho·Wo) × (C·k·k)."""

    checked = False

    def forward(self, x, k, stride):
        n, c, h, w = x.shape
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        self.saved = {"shape": x.shape, "k": k, "stride": stride}
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)

    def backward(self, g):
        s = self.saved
        return (Col2Im.apply(g, shape=s["shape"], k=s["k"], stride=s["stride"]),)


class Col2Im(Function):
    """Adjoint of Im2Col: scatter-add patch rows back onto the image grid."""

    checked = False

    def forward(self, cols, shape, k, stride):
        n, c, h, w = shape
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        self.saved = {"k": k, "stride": stride}
        cols6 = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        out = np.zeros(shape, dtype=cols.dtype)
        he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                out[:, :, i : i + he : stride, j : j + we : stride] += cols6[..., i, j]
        return out

    def backward(self, g):
        return (Im2Col.apply(g, k=self.saved["k"], stride=self.saved["stride"]),)


# ----------------------------------------------------------- convolution
# Stride-1 correlation is evaluated on the flattened zero-padded grid: with the
# input laid out as C × (N·Hp·Wp), tap (i, j) is a column shift of i·Wp + j, so
# one matmul against all taps plus k² shifted adds replaces an im2col copy.
# Strided convolutions instead gather each tap's subsampled input. With many output rows
# a product per tap is cheaper than one tall product of all taps at once.
PER_TAP_MIN_ROWS = 16


def _flat_padded(x: np.ndarray, p: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    hp, wp = h + 2 * p, w + 2 * p
    buf = np.zeros((c, n, hp, wp), dtype=x.dtype)
    buf[:, :, p : p + h, p : p + w] = x.transpose(1, 0, 2, 3)
    return buf.reshape(c, n * hp * wp), hp, wp


def _valid_span(total: int, wp: int, k: int) -> int:
    return total - (k - 1) * wp - (k - 1)


def _out_hw(hp, wp, k, s):
    return (hp - k) // s + 1, (wp - k) // s + 1


def _tap_view(buf, a, b, s, ho, wo):
    """Input samples met by tap (a, b) at every strided output position."""
    return buf[:, :, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s]


def _strided_forward(x, w, p, s):
    flat, hp, wp = _flat_padded(x, p)
    n, cin = x.shape[:2]
    cout, _, k, _ = w.shape
    buf = flat.reshape(cin, n, hp, wp)
    ho, wo = _out_hw(hp, wp, k, s)
    out = np.zeros((cout, n * ho * wo), dtype=np.result_type(x, w))
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # strided slices would bypass BLAS
    for a in range(k):
        for b in range(k):
            out += wt[a, b] @ _tap_view(buf, a, b, s, ho, wo).reshape(cin, -1)
    return np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))


def _strided_input_grad(g, w, p, s, in_hw):
    n, cout, ho, wo = g.shape
    _, cin, k, _ = w.shape
    h, wd = in_hw
    buf = np.zeros((cin, n, h + 2 * p, wd + 2 * p), dtype=np.result_type(g, w))
    g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for a in range(k):
        for b in range(k):
            _tap_view(buf, a, b, s, ho, wo)[...] += (wt[a, b] @ g2).reshape(cin, n, ho, wo)
    return np.ascontiguousarray(buf[:, :, p : p + h, p : p + wd].transpose(1, 0, 2, 3))


def _strided_weight_grad(x, g, p, s, k):
    flat, hp, wp = _flat_padded(x, p)
    n, cin = x.shape[:2]
    cout, ho, wo = g.shape[1:]
    buf = flat.reshape(cin, n, hp, wp)
    g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
    out = np.empty((k, k, cout, cin), dtype=np.result_type(x, g))
    for a in range(k):
        for b in range(k):
            out[a, b] = g2 @ _tap_view(buf, a, b, s, ho, wo).reshape(cin, -1).T
    return out.transpose(2, 3, 0, 1).copy()


def _conv_forward(x, w, p, s):
    if s > 1:
        return _strided_forward(x, w, p, s)
    n = x.shape[0]
    cout, cin, k, _ = w.shape
    flat, hp, wp = _flat_padded(x, p)
    total = flat.shape[1]
    if k == 1:
        full = w.reshape(cout, cin) @ flat
    else:
        wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        full = _forward_taps(wt, flat, _valid_span(total, wp, k), wp, k, cout, total)
    full = full.reshape(cout, n, hp, wp)[:, :, : hp - k + 1 : s, : wp - k + 1 : s]
    return np.ascontiguousarray(full.transpose(1, 0, 2, 3))


def _forward_taps(wt, flat, span, wp, k, cout, total):
    dtype = np.result_type(wt, flat)
    full = np.zeros((cout, total), dtype=dtype)
    if cout >= PER_TAP_MIN_ROWS:
        tmp = np.empty((cout, span), dtype=dtype)
        for t in range(k * k):
            off = (t // k) * wp + t % k
            np.matmul(wt[t // k, t % k], flat[:, off : off + span], out=tmp)
            full[:, :span] += tmp
        return full
    taps = wt.reshape(k * k * cout, -1) @ flat
    for t in range(k * k):
        off = (t // k) * wp + t % k
        full[:, :span] += taps[t * cout : (t + 1) * cout, off : off + span]
    return full


def _spread_output_grad(g, hp, wp, k, s):
    n, cout = g.shape[:2]
    full = np.zeros((cout, n, hp, wp), dtype=g.dtype)
    full[:, :, : hp - k + 1 : s, : wp - k + 1 : s] = g.transpose(1, 0, 2, 3)
    return full.reshape(cout, n * hp * wp)


def _conv_input_grad(g, w, p, s, in_hw):
    if s > 1:
        return _strided_input_grad(g, w, p, s, in_hw)
    n = g.shape[0]
    cout, cin, k, _ = w.shape
    h, wd = in_hw
    hp, wp = h + 2 * p, wd + 2 * p
    gfull = _spread_output_grad(g, hp, wp, k, s)
    total = gfull.shape[1]
    span = _valid_span(total, wp, k)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    gspan = gfull[:, :span]
    dx = np.zeros((cin, total), dtype=np.result_type(g, w))
    if cin >= PER_TAP_MIN_ROWS:
        tmp = np.empty((cin, span), dtype=dx.dtype)
        for t in range(k * k):
            off = (t // k) * wp + t % k
            np.matmul(wt[t // k, t % k], gspan, out=tmp)
            dx[:, off : off + span] += tmp
    else:
        taps = wt.reshape(k * k * cin, cout) @ gspan
        for t in range(k * k):
            off = (t // k) * wp + t % k
            dx[:, off : off + span] += taps[t * cin : (t + 1) * cin]
    dx = dx.reshape(cin, n, hp, wp)[:, :, p : p + h, p : p + wd]
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3))


def _conv_weight_grad(x, g, p, s, k):
    if s > 1:
        return _strided_weight_grad(x, g, p, s, k)
    flat, hp, wp = _flat_padded(x, p)
    gfull = _spread_output_grad(g, hp, wp, k, s)
    span = _valid_span(flat.shape[1], wp, k)
    gspan = gfull[:, :span]
    out = np.empty((k, k, g.shape[1], x.shape[1]), dtype=np.result_type(x, g))
    for t in range(k * k):
        off = (t // k) * wp + t % k
        np.matmul(gspan, flat[:, off : off + span].T, out=out[t // k, t % k])
    return out.transpose(2, 3, 0, 1).copy()


class Conv2d(Function):
    """Cross-correlation of N×Cin×H×W with Cout×Cin×k×k (zero padding, stride)."""

    def forward(self, x, w, padding, stride):
        self.saved = {"p": padding, "s": stride, "hw": x.shape[2:], "k": w.shape[2]}
        return _conv_forward(x, w, padding, stride)

    def backward(self, g):
        x, w = self.inputs
        sv = self.saved
        gx = ConvInputGrad.apply(g, w, padding=sv["p"], stride=sv["s"], in_hw=sv["hw"]) if self.needs[0] else None
        gw = ConvWeightGrad.apply(x, g, padding=sv["p"], stride=sv["s"], k=sv["k"]) if self.needs[1] else None
        return gx, gw


class ConvInputGrad(Function):
    """Adjoint of Conv2d in its input: bilinear in (output grad, weight)."""

    def forward(self, g, w, padding, stride, in_hw):
        self.saved = {"p": padding, "s": stride, "k": w.shape[2]}
        return _conv_input_grad(g, w, padding, stride, in_hw)

    def backward(self, gg):
        g, w = self.inputs
        sv = self.saved
        dg = Conv2d.apply(gg, w, padding=sv["p"], stride=sv["s"]) if self.needs[0] else None
        dw = ConvWeightGrad.apply(gg, g, padding=sv["p"], stride=sv["s"], k=sv["k"]) if self.needs[1] else None
        return dg, dw


class ConvWeightGrad(Function):
    """Weight gradient of Conv2d: bilinear in (input, output grad)."""

    def forward(self, x, g, padding, stride, k):
        self.saved = {"p": padding, "s": stride, "hw": x.shape[2:]}
        return _conv_weight_grad(x, g, padding, stride, k)

    def backward(self, gw):
        x, g = self.inputs
        sv = self.saved
        dx = ConvInputGrad.apply(g, gw, padding=sv["p"], stride=sv["s"], in_hw=sv["hw"]) if self.needs[0] else None
        dg = Conv2d.apply(x, gw, padding=sv["p"], stride=sv["s"]) if self.needs[1] else None
        return dx, dg


# --------------------------------------------------------------- backward
def _collect(roots: Iterable[Tensor]) -> list[Function]:
    seen: set[int] = set()
    order: list[Function] = []
    stack = [t._fn for t in roots if t._fn is not None]
    while stack:
        fn = stack.pop()
        if id(fn) in seen:
            continue
        seen.add(id(fn))
        order.append(fn)
        for t in fn.inputs:
            if t._fn is not None and id(t._fn) not in seen:
                stack.append(t._fn)
    order.sort(key=lambda f: f.index, reverse=True)
    return order


def _run_backward(
    output: Tensor,
    seed: Tensor,
    create_graph: bool,
    retain_graph: bool,
    wanted: set[int] | None = None,
) -> dict[int, tuple[Tensor, Tensor]]:
    """Propagate ``seed`` from ``output``; returns {id(leaf): (leaf, grad)}.

    With ``wanted`` (ids of leaves) only paths reaching those leaves are evaluated.
    """
    if output._fn is None:
        raise UsageError("backward called on a tensor that has no graph node")
    order = _collect([output])
    live = None
    if wanted is not None:
        live = {}
        for fn in reversed(order):
            live[id(fn)] = tuple(
                need and (id(t) in wanted if t._fn is None else id(t._fn) in live and any(live[id(t._fn)]))
                for t, need in zip(fn.inputs, fn.needs)
            )
    grads: dict[int, Tensor] = {id(output): seed}
    leaves: dict[int, tuple[Tensor, Tensor]] = {}
    with _grad_mode(create_graph):
        for fn in order:
            if fn.released:
                raise UsageError("graph already traversed; pass retain_graph=True to backward twice")
            g = grads.pop(fn.out_id, None)
            if g is None:
                continue
            if live is None:
                in_grads = fn.backward(g)
            else:
                full = fn.needs
                fn.needs = live[id(fn)]
                try:
                    in_grads = fn.backward(g) if any(fn.needs) else ()
                finally:
                    fn.needs = full
            for t, need, gi in zip(fn.inputs, fn.needs if live is None else live[id(fn)], in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if t._fn is None:
                    prev = leaves.get(key)
                    leaves[key] = (t, gi if prev is None else prev[1] + gi)
                else:
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
            if not retain_graph and not create_graph:
                fn.released = True
                fn.saved = {}
    return leaves



def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise UsageError(f"backward needs a single-element loss, got shape {loss.shape}")
    seed = Tensor(np.ones(loss.shape, dtype=loss.dtype))
    leaves = _run_backward(loss, seed, create_graph=False, retain_graph=retain_graph)
    for leaf, g in leaves.values():
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
    retain_graph: bool | None = None,
    allow_unused: bool = True,
) -> list[Tensor]:
    """Return d(output)/d(input) as Tensors without touching ``.grad``.

    With ``create_graph`` the returned tensors carry their own graph and can be
    differentiated again. Unused inputs get a zero tensor.
    """
    if output.size != 1:
        raise UsageError(f"grad needs a single-element output, got shape {output.shape}")
    if retain_graph is None:
        retain_graph = create_graph
    seed = Tensor(np.ones(output.shape, dtype=output.dtype))
    wanted = {id(t) for t in inputs}
    leaves = _run_backward(output, seed, create_graph=create_graph, retain_graph=retain_graph, wanted=wanted)
    result = []
    for t in inputs:
        hit = leaves.get(id(t))
        if hit is None:
            if not allow_unused:
                raise UsageError(f"input {t!r} does not reach the output")
            result.append(Tensor(np.zeros(t.shape, dtype=t.dtype)))
        else:
            result.append(hit[1])
    return result


def pointwise_binary(a: Tensor, b: Tensor, op: str) -> Tensor:
    ops: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
        "add": Add.apply,
        "sub": Sub.apply,
        "mul": Mul.apply,
        "div": Div.apply,
    }
    if op not in ops:
        raise UsageError(f"unknown binary op {op!r}")
    return ops[op](a, _lift(b, a))


def pointwise_unary(a: Tensor, op: str) -> Tensor:
    ops: dict[str, Callable[[Tensor], Tensor]] = {
        "relu": Tensor.relu,
        "sigmoid": Tensor.sigmoid,
        "neg": Tensor.__neg__,
        "square": Tensor.square,
        "exp": Tensor.exp,
        "log": Tensor.log,
        "abs": Tensor.abs,
    }
    if op not in ops:
        raise UsageError(f"unknown unary op {op!r}")
    return ops[op](a)


def reduce(a: Tensor, op: str, axes=None, keepdims: bool = False) -> Tensor:
    if op == "sum":
        return a.sum(axes, keepdims)
    if op == "mean":
        return a.mean(axes, keepdims)
    raise UsageError(f"unknown reduction {op!r}")
