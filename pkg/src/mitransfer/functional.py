"""Differentiable layer operations on NCHW tensors.

Convolutions use the cross-correlation convention (no kernel flip) and take
explicit padding only; callers compute "same" padding themselves.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, as_tensor, make_result

# Upper bound on the number of elements materialized by one im2col chunk.
_IM2COL_BUDGET = 1 << 24


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


def _padding(value) -> tuple[tuple[int, int], tuple[int, int]]:
    """Normalize ``p``, ``(ph, pw)`` or ``((top, bottom), (left, right))``."""
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 2, (int(value),) * 2
    ph, pw = value
    ph = (int(ph), int(ph)) if isinstance(ph, (int, np.integer)) else tuple(map(int, ph))
    pw = (int(pw), int(pw)) if isinstance(pw, (int, np.integer)) else tuple(map(int, pw))
    if min(ph + pw) < 0:
        raise DimensionError("padding must be non-negative")
    return ph, pw


def output_extent(extent: int, kernel: int, stride: int = 1, pad_before: int = 0, pad_after: int = 0) -> int:
    """Number of window positions along one axis (floor convention)."""
    return (extent + pad_before + pad_after - kernel) // stride + 1


def same_padding(kernel: int) -> tuple[int, int]:
    """(before, after) padding keeping the extent at stride 1; the extra
    element for even kernels goes after."""
    return (kernel - 1) // 2, kernel // 2


def _check_window(H, W, kh, kw, sh, sw, what):
    if sh < 1 or sw < 1:
        raise DimensionError(f"{what}: stride must be >= 1, got {(sh, sw)}")
    if kh > H or kw > W:
        raise DimensionError(f"{what}: window {(kh, kw)} larger than padded input {(H, W)}")


def _pad_array(x: np.ndarray, ph, pw) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), ph, pw))


def _crop(dx: np.ndarray, ph, pw) -> np.ndarray:
    H, W = dx.shape[2], dx.shape[3]
    return dx[:, :, ph[0] : H - ph[1], pw[0] : W - pw[1]]


def _window_slice(start: int, stride: int, count: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


# ----------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """Dense 2-D cross-correlation.

    ``x`` is (N, Cin, H, W), ``kernel`` is (Cout, Cin, kh, kw).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    N, Cin, H, W = x.shape
    Cout, Ck, kh, kw = kernel.shape
    if Ck != Cin:
        raise DimensionError(f"conv2d: input has {Cin} channels, kernel expects {Ck}")
    sh, sw = _pair(stride)
    ph, pw = _padding(padding)
    xp = _pad_array(x.data, ph, pw)
    Hp, Wp = xp.shape[2], xp.shape[3]
    _check_window(Hp, Wp, kh, kw, sh, sw, "conv2d")
    Ho = output_extent(Hp, kh, sh)
    Wo = output_extent(Wp, kw, sw)

    per_sample = Cin * Ho * Wo * kh * kw
    chunk = max(1, _IM2COL_BUDGET // max(per_sample, 1))

    def windows(lo, hi):
        return sliding_window_view(xp[lo:hi], (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]

    out = np.empty((N, Cout, Ho, Wo), dtype=xp.dtype)
    k = kernel.data
    for lo in range(0, N, chunk):
        hi = min(N, lo + chunk)
        res = np.tensordot(windows(lo, hi), k, axes=([1, 4, 5], [1, 2, 3]))
        out[lo:hi] = res.transpose(0, 3, 1, 2)

    def backward(g):
        dk = None
        if kernel.requires_grad:
            dk = np.zeros_like(k)
            for lo in range(0, N, chunk):
                hi = min(N, lo + chunk)
                dk += np.tensordot(g[lo:hi], windows(lo, hi), axes=([0, 2, 3], [0, 2, 3]))
        dx = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            gt = g.transpose(0, 2, 3, 1)  # N, Ho, Wo, Cout
            for i in range(kh):
                rows = _window_slice(i, sh, Ho)
                for j in range(kw):
                    cols = _window_slice(j, sw, Wo)
                    contrib = gt @ k[:, :, i, j]  # N, Ho, Wo, Cin
                    dxp[:, :, rows, cols] += contrib.transpose(0, 3, 1, 2)
            dx = _crop(dxp, ph, pw)
        return dx, dk

    return make_result(out, (x, kernel), backward)


def depthwise_conv2d(x: Tensor, kernel: Tensor, depth_multiplier: int = 1, stride=1, padding=0) -> Tensor:
    """Per-channel convolution; output channel ``c*D + d`` sees only input
    channel ``c`` through kernel slice ``c*D + d``.

    ``kernel`` is (C*D, 1, kh, kw).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("depthwise_conv2d expects 4-D input and kernel")
    N, C, H, W = x.shape
    D = int(depth_multiplier)
    CD, one, kh, kw = kernel.shape
    if one != 1 or D < 1 or CD % C != 0 or CD != C * D:
        raise DimensionError(
            f"depthwise_conv2d: kernel count {CD} does not match {C} channels x depth {D}"
        )
    sh, sw = _pair(stride)
    ph, pw = _padding(padding)
    xp = _pad_array(x.data, ph, pw)
    Hp, Wp = xp.shape[2], xp.shape[3]
    _check_window(Hp, Wp, kh, kw, sh, sw, "depthwise_conv2d")
    Ho = output_extent(Hp, kh, sh)
    Wo = output_extent(Wp, kw, sw)
    k = kernel.data.reshape(C, D, kh, kw)

    out = np.zeros((N, C, D, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        rows = _window_slice(i, sh, Ho)
        for j in range(kw):
            cols = _window_slice(j, sw, Wo)
            out += xp[:, :, None, rows, cols] * k[None, :, :, i, j, None, None]

    def backward(g):
        g5 = g.reshape(N, C, D, Ho, Wo)
        dk = np.zeros_like(k) if kernel.requires_grad else None
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            rows = _window_slice(i, sh, Ho)
            for j in range(kw):
                cols = _window_slice(j, sw, Wo)
                if dk is not None:
                    dk[:, :, i, j] = np.einsum("ncdhw,nchw->cd", g5, xp[:, :, rows, cols])
                if dxp is not None:
                    dxp[:, :, rows, cols] += np.einsum("ncdhw,cd->nchw", g5, k[:, :, i, j])
        return (
            None if dxp is None else _crop(dxp, ph, pw),
            None if dk is None else dk.reshape(kernel.shape),
        )

    return make_result(out.reshape(N, C * D, Ho, Wo), (x, kernel), backward)


# ----------------------------------------------------------------------
# pooling


def pool2d(x: Tensor, kind: str = "max", window=2, stride=None) -> Tensor:
    """Max or average pooling without padding.

    Max pooling routes the gradient to the first maximum of each window.
    """
    if x.ndim != 4:
        raise DimensionError("pool2d expects a 4-D input")
    if kind not in ("max", "average"):
        raise ValueError(f"pool kind must be 'max' or 'average', got {kind!r}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    N, C, H, W = x.shape
    _check_window(H, W, kh, kw, sh, sw, "pool2d")
    Ho = output_extent(H, kh, sh)
    Wo = output_extent(W, kw, sw)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]

    if kind == "max":
        flat = win.reshape(N, C, Ho, Wo, kh * kw)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    else:
        out = win.mean(axis=(-2, -1))

    def backward(g):
        dx = np.zeros_like(x.data)
        for i in range(kh):
            rows = _window_slice(i, sh, Ho)
            for j in range(kw):
                cols = _window_slice(j, sw, Wo)
                if kind == "max":
                    dx[:, :, rows, cols] += g * (arg == i * kw + j)
                else:
                    dx[:, :, rows, cols] += g / (kh * kw)
        return (dx,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def upsample(x: Tensor, factor=(1, 2)) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by integer factors."""
    fh, fw = _pair(factor)
    out = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

    def backward(g):
        N, C, H, W = x.shape
        return (g.reshape(N, C, H, fh, W, fw).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


def pad(x: Tensor, padding) -> Tensor:
    ph, pw = _padding(padding)

    def backward(g):
        return (_crop(g, ph, pw),)

    return make_result(_pad_array(x.data, ph, pw), (x,), backward)


# ----------------------------------------------------------------------
# normalization and pointwise ops


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except axis 1.

    In training mode the batch statistics normalize ``x`` and the running
    buffers are updated in place as ``momentum * running + (1 - momentum) *
    batch`` (biased batch variance).  In inference mode the running buffers
    are used.
    """
    if x.shape[0] == 0:
        raise DimensionError("batch_norm needs a non-empty batch")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm: gamma/beta must have length {C}")
    axes = tuple(a for a in range(x.ndim) if a != 1)
    bshape = [1] * x.ndim
    bshape[1] = C
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = g_ * xhat + b_

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * g_
        if training:
            dx = inv_std.reshape(bshape) * (
                gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = gx * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward)


def activation(x: Tensor, kind: str = "elu", alpha: float = 1.0) -> Tensor:
    if kind == "linear":
        return x
    if kind == "relu":
        mask = x.data > 0

        def backward(g):
            return (g * mask,)

        return make_result(x.data * mask, (x,), backward)
    if kind == "elu":
        neg = x.data < 0
        expm = np.expm1(np.where(neg, x.data, 0.0))
        out = np.where(neg, alpha * expm, x.data)

        def backward(g):
            return (g * np.where(neg, alpha * (expm + 1.0), 1.0),)

        return make_result(out, (x,), backward)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: surviving units are scaled by ``1 / (1 - rate)``."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


__all__ = [
    "activation",
    "as_tensor",
    "batch_norm",
    "conv2d",
    "depthwise_conv2d",
    "dropout",
    "flatten",
    "linear",
    "output_extent",
    "pad",
    "pool2d",
    "same_padding",
    "softmax",
    "upsample",
]
