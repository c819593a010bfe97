"""Differentiable neural-network primitives built on :mod:`cvm_cervix.tensor`.

Convolution forwards accumulate products one (channel, kernel-row,
kernel-col) term at a time in that order, so every output element sees the
same sequence of additions as a textbook nested loop.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError, LabelError
from .tensor import Tensor, _check_compute, as_tensor, make_result

GELU_COEF = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _check_conv_geometry(op: str, x: Tensor, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise DimensionError(f"{op}: input must be B×C×H×W, got shape {x.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"{op}: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    h, w = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if kh > h or kw > w:
        raise DimensionError(f"{op}: kernel {kh}×{kw} larger than padded input {h}×{w}")
    return _out_size(x.shape[2], kh, stride, padding), _out_size(x.shape[3], kw, stride, padding)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B×C×H×W) with ``kernel`` (O×C×kH×kW)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_compute(x, kernel)
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be O×C×kH×kW, got shape {kernel.shape}")
    o, c, kh, kw = kernel.shape
    ho, wo = _check_conv_geometry("conv2d", x, kh, kw, stride, padding)
    if x.shape[1] != c:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c}")

    xp = _pad(x.data, padding)
    w = kernel.data
    out = np.zeros((x.shape[0], o, ho, wo), dtype=np.result_type(x.data, w))
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, ci, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                out += xs[:, None] * w[:, ci, i, j][None, :, None, None]

    def bw(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                xs = _window(xp, i, j, stride, ho, wo)
                gw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # B×ho×wo×C
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    contrib.transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw

    return make_result("conv2d", out, (x, kernel), bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial convolution; ``kernel`` is C×1×kH×kW."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_compute(x, kernel)
    if kernel.ndim != 4 or kernel.shape[1] != 1:
        raise DimensionError(f"depthwise_conv2d: kernel must be C×1×kH×kW, got shape {kernel.shape}")
    c, _, kh, kw = kernel.shape
    ho, wo = _check_conv_geometry("depthwise_conv2d", x, kh, kw, stride, padding)
    if x.shape[1] != c:
        raise DimensionError(f"depthwise_conv2d: input has {x.shape[1]} channels, kernel has {c}")

    xp = _pad(x.data, padding)
    w = kernel.data
    out = np.zeros((x.shape[0], c, ho, wo), dtype=np.result_type(x.data, w))
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, stride, ho, wo) * w[:, 0, i, j][None, :, None, None]

    def bw(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for i in range(kh):
            for j in range(kw):
                xs = _window(xp, i, j, stride, ho, wo)
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xs)
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    g * w[:, 0, i, j][None, :, None, None]
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw

    return make_result("depthwise_conv2d", out, (x, kernel), bw)


def pointwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """1×1 convolution mixing channels; ``kernel`` is O×C×1×1."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_compute(x, kernel)
    if kernel.ndim != 4 or kernel.shape[2:] != (1, 1):
        raise ContractError(f"pointwise_conv2d: kernel must be O×C×1×1, got shape {kernel.shape}")
    if x.ndim != 4:
        raise DimensionError(f"pointwise_conv2d: input must be B×C×H×W, got shape {x.shape}")
    o, c = kernel.shape[:2]
    if x.shape[1] != c:
        raise DimensionError(f"pointwise_conv2d: input has {x.shape[1]} channels, kernel expects {c}")

    w = kernel.data[:, :, 0, 0]
    out = np.zeros((x.shape[0], o) + x.shape[2:], dtype=np.result_type(x.data, w))
    for ci in range(c):
        out += x.data[:, ci][:, None] * w[:, ci][None, :, None, None]

    def bw(g):
        gx = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2)
        gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw[:, :, None, None]

    return make_result("pointwise_conv2d", out, (x, kernel), bw)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def _pool_geometry(op: str, x: Tensor, window: int, stride: int | None) -> tuple[int, int, int]:
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"{op}: input must be B×C×H×W, got shape {x.shape}")
    if window < 1 or stride < 1:
        raise DimensionError(f"{op}: window and stride must be >= 1")
    if window > x.shape[2] or window > x.shape[3]:
        raise DimensionError(f"{op}: window {window} exceeds input {x.shape[2]}×{x.shape[3]}")
    return stride, _out_size(x.shape[2], window, stride, 0), _out_size(x.shape[3], window, stride, 0)


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Window-wise maximum. Gradient goes to the first maximum in row-major order."""
    x = as_tensor(x)
    _check_compute(x)
    stride, ho, wo = _pool_geometry("max_pool2d", x, window, stride)
    views = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    views = views[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = views.reshape(views.shape[:4] + (window * window,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        b, c = np.meshgrid(np.arange(x.shape[0]), np.arange(x.shape[1]), indexing="ij")
        rows = np.arange(ho)[:, None] * stride + arg // window
        cols = np.arange(wo)[None, :] * stride + arg % window
        np.add.at(gx, (b[:, :, None, None], c[:, :, None, None], rows, cols), g)
        return (gx,)

    return make_result("max_pool2d", np.ascontiguousarray(out), (x,), bw)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    _check_compute(x)
    stride, ho, wo = _pool_geometry("avg_pool2d", x, window, stride)
    area = window * window
    out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            out += _window(x.data, i, j, stride, ho, wo)
    out /= area

    def bw(g):
        gx = np.zeros_like(x.data)
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g / area
        return (gx,)

    return make_result("avg_pool2d", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the full spatial plane: B×C×H×W -> B×C."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: input must be B×C×H×W, got shape {x.shape}")
    return x.mean(axis=(2, 3))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    _check_compute(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last axis {d} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result("layer_norm", out, (x, gain, bias), bw)


def batch_norm2d(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of B×C×H×W input.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (the variance estimate is unbiased).
    In eval mode the running statistics are used.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    _check_compute(x, gain, bias)
    if x.ndim != 4 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm2d: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ContractError(f"batch_norm2d: degenerate batch, B·H·W = {n} < 2 in training mode")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * (n / (n - 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gain.data.reshape(shape) + bias.data.reshape(shape)

        def bw(g):
            dxhat = g * gain.data.reshape(shape)
            gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = (1.0 / np.sqrt(running_var.astype(x.dtype) + eps)).reshape(shape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(shape)) * inv
        out = xhat * gain.data.reshape(shape) + bias.data.reshape(shape)

        def bw(g):
            return g * gain.data.reshape(shape) * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result("batch_norm2d", out.astype(x.dtype, copy=False), (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_compute(x)
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    _check_compute(x)
    v = x.data
    t = np.tanh(GELU_COEF * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * GELU_COEF * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return make_result("gelu", out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_compute(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (x,), bw)


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    _check_compute(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_loss: logits must be B×C, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise DimensionError(f"cross_entropy_loss: {labels.shape[0]} labels for batch of {b}")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(b), labels]
    out = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), labels] -= 1.0
        return (p * (g / b),)

    return make_result("cross_entropy", out, (logits,), bw)
