"""Network layers composed from the differentiable primitives in ``tensor``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateBatchError, ShapeError
from .rng import Rng
from .tensor import DEFAULT_DTYPE, Col2Im, Conv2d, Im2Col, Scatter, Tensor


def tensor_create(
    shape,
    init: str = "zeros",
    *,
    value: float | None = None,
    low: float | None = None,
    high: float | None = None,
    fan_in: int | None = None,
    rng: Rng | None = None,
    requires_grad: bool = False,
    dtype=DEFAULT_DTYPE,
    name: str | None = None,
) -> Tensor:
    """Allocate a tensor filled by ``init`` in {zeros, constant, uniform, kaiming}.

    ``kaiming`` draws from U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: extents must be >= 1")
    if init == "zeros":
        arr = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        arr = np.full(shape, float(value), dtype=dtype)
    elif init == "uniform":
        if low is None or high is None or not low < high:
            raise ValueError("uniform init needs low < high")
        arr = np.asarray(_need(rng).uniform(low, high, shape), dtype=dtype)
    elif init == "kaiming":
        if not fan_in or fan_in < 1:
            raise ValueError("kaiming init needs fan_in >= 1")
        bound = np.sqrt(6.0 / fan_in)
        arr = np.asarray(_need(rng).uniform(-bound, bound, shape), dtype=dtype)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(arr, requires_grad=requires_grad, name=name, dtype=dtype)


def _need(rng):
    if rng is None:
        raise ValueError("random init requires an Rng")
    return rng


def conv_out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def pad2d(x: Tensor, p: int) -> Tensor:
    if p == 0:
        return x
    n, c, h, w = x.shape
    index = (slice(None), slice(None), slice(p, p + h), slice(p, p + w))
    return Scatter.apply(x, shape=(n, c, h + 2 * p, w + 2 * p), index=index)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of N×Cin×H×W input with Cout×Cin×k×k filters, plus bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs square odd kernels, got {k}×{k2}")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(f"input {h}×{wd} too small for kernel {k} with padding {padding}")
    out = Conv2d.apply(x, w, padding=padding, stride=stride)
    if b is not None:
        out = out + b.reshape(1, cout, 1, 1)
    return out


def conv2d_unfolded(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Reference convolution via explicit patch unfolding and a matmul."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = conv_out_extent(h, k, stride, padding), conv_out_extent(wd, k, stride, padding)
    cols = Im2Col.apply(pad2d(x, padding), k=k, stride=stride)
    out = cols @ w.reshape(cout, cin * k * k).transpose(1, 0)
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def col2im(cols: Tensor, shape, k: int, stride: int) -> Tensor:
    return Col2Im.apply(cols, shape=tuple(shape), k=k, stride=stride)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState | None = None,
    training: bool = True,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalization; batch statistics in training, running ones in eval.

    Running variance is tracked with the unbiased estimator.
    """
    n, c, h, w = x.shape
    gamma4 = gamma.reshape(1, c, 1, 1)
    beta4 = beta.reshape(1, c, 1, 1)
    if training:
        population = n * h * w
        if population < 2:
            raise DegenerateBatchError("batchnorm in train mode needs a batch×spatial population >= 2")
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        if state is not None and update_stats:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean.data.reshape(c)
            unbiased = var.data.reshape(c) * population / (population - 1)
            state.running_var = (1 - m) * state.running_var + m * unbiased
        xhat = centered * (var + eps) ** -0.5
    else:
        if state is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        rm = Tensor(state.running_mean.reshape(1, c, 1, 1).astype(x.dtype))
        inv = Tensor((1.0 / np.sqrt(state.running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype))
        xhat = (x - rm) * inv
    return xhat * gamma4 + beta4


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 1 or int(factor) != factor:
        raise ValueError("upsample factor must be a positive integer")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    return (
        x.reshape(n, c, h, 1, w, 1)
        .expand((n, c, h, factor, w, factor))
        .reshape(n, c, h * factor, w * factor)
    )


def crop_to(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[2] == h and x.shape[3] == w:
        return x
    return x[:, :, :h, :w]
