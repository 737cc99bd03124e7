"""Differentiable operators (forward + hand-written backward).

All image-like tensors use the (batch, channels, rows, cols) layout. Every op
preserves the dtype of its input, so a network built in float64 can be checked
against finite differences at tight tolerances.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DegenerateStatisticsError, DimensionError, InputError
from .tensor import Tensor, as_tensor, make_node

PAD_MODES = ("zeros", "circular")
BN_MOMENTUM = 0.1


def _check4(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects a 4-D (n, c, h, w) tensor, got shape {x.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, "mul", (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return make_node(out, "reshape", (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(out, "sum", (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_node(out, "relu", (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return make_node(s, "sigmoid", (x,), backward)


def pointwise_activation(x: Tensor, kind: str = "relu") -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    if mode == "zeros":
        return np.pad(x, width)
    return np.pad(x, width, mode="wrap")


@lru_cache(maxsize=256)
def _wrap_fold(size: int, p: int) -> np.ndarray:
    """(size, size + 2p) one-hot matrix summing circular-pad gradients back onto the source."""
    fold = np.zeros((size, size + 2 * p))
    fold[np.arange(-p, size + p) % size, np.arange(size + 2 * p)] = 1.0
    return fold


def _unpad(g: np.ndarray, p: int, mode: str, h: int, w: int) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zeros":
        return g[:, :, p : p + h, p : p + w]
    fh = _wrap_fold(h, p).astype(g.dtype)
    fw = _wrap_fold(w, p).astype(g.dtype)
    return np.matmul(np.matmul(fh, g), fw.T)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    pad_mode: str = "zeros",
) -> Tensor:
    """2-D cross-correlation via im2col and a single matmul.

    ``weight`` has shape (c_out, c_in, kh, kw) with odd kernel sides. With
    ``pad_mode='circular'`` the image is treated as a torus, which makes the op
    exactly equivariant to circular shifts by multiples of ``stride``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check4(x, "conv2d")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be (c_out, c_in, kh, kw), got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise DimensionError(f"conv2d: input has {c} channels but weight expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    if pad_mode not in PAD_MODES:
        raise ConfigurationError(f"pad_mode must be one of {PAD_MODES}, got {pad_mode!r}")
    if pad_mode == "circular" and padding > min(kh, kw) // 2:
        raise ConfigurationError("circular padding may not exceed the kernel radius")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"conv2d output would be empty for input {h}x{w}, kernel {kh}x{kw}")

    wmat = weight.data.reshape(c_out, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = None
        out = np.matmul(wmat, x.data.reshape(n, c, h * w)).reshape(n, c_out, h, w)
    else:
        xp = _pad(x.data, padding, pad_mode)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
        out = (cols @ wmat.T).reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if pointwise:
            g3 = g.reshape(n, c_out, h * w)
            if weight.requires_grad:
                gw = np.einsum("nop,ncp->oc", g3, x.data.reshape(n, c, h * w)).reshape(weight.shape)
            if x.requires_grad:
                gx = np.matmul(wmat.T, g3).reshape(x.shape)
            return gx, gw, gb
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(weight.shape)
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
            gx = _unpad(gxp, padding, pad_mode, h, w)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_trim(g):
        grads = backward(g)
        return grads if bias is not None else grads[:2]

    return make_node(out, "conv2d", parents, backward_trim)


# ---------------------------------------------------------------------------
# normalization


def _norm_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes, count: int) -> np.ndarray:
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv_std * (g_hat - s1 / count - xhat * s2 / count)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics over (n, h, w) are used and the
    running estimates, if given, are updated in place with
    ``r <- (1 - momentum) * r + momentum * stat`` (unbiased variance). In eval
    mode the running estimates are used and the op is affine in ``x``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check4(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm affine terms must have shape ({c},)")
    shape = (1, c, 1, 1)
    if training:
        count = n * h * w
        if count < 2:
            raise DegenerateStatisticsError(
                f"batch_norm in train mode needs at least 2 values per channel, got {count}"
            )
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.reshape(c)
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c) * (count / (count - 1))
    else:
        if running_mean is None or running_var is None:
            raise ConfigurationError("batch_norm eval mode needs running statistics")
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(shape).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(shape)) * inv_std
        count = None
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            g_hat = g * gamma.data.reshape(shape)
            if training:
                gx = _norm_backward(g_hat, xhat, inv_std, (0, 2, 3), count)
            else:
                gx = g_hat * inv_std
        return gx, gg, gbeta

    return make_node(out, "batch_norm", (x, gamma, beta), backward)


def group_norm(x: Tensor, n_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over every group of ``c / n_groups`` channels and all positions."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check4(x, "group_norm")
    n, c, h, w = x.shape
    if n_groups < 1 or c % n_groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible into {n_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm affine terms must have shape ({c},)")
    xg = x.data.reshape(n, n_groups, -1)
    count = xg.shape[-1]
    mean = xg.mean(axis=-1, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    shape = (1, c, 1, 1)
    xhat4 = xhat.reshape(x.shape)
    out = xhat4 * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat4).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            g_hat = (g * gamma.data.reshape(shape)).reshape(n, n_groups, -1)
            gx = _norm_backward(g_hat, xhat, inv_std, -1, count).reshape(x.shape)
        return gx, gg, gbeta

    return make_node(out, "group_norm", (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# pooling


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping 2x2 max pooling; odd spatial sizes are rejected, not padded."""
    x = as_tensor(x)
    _check4(x, "max_pool2d")
    if k != 2 or stride != 2:
        raise ConfigurationError("max_pool2d supports only k=2, stride=2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_node(out, "max_pool2d", (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial maximum per (sample, channel) -> shape (n, c). Ties route to the first row-major argmax."""
    x = as_tensor(x)
    _check4(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx.reshape(x.shape),)

    return make_node(out, "global_max_pool", (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per (sample, channel) -> shape (n, c)."""
    x = as_tensor(x)
    _check4(x, "global_avg_pool")
    n, c, h, w = x.shape
    # summing in sorted order makes the result independent of pixel order, so
    # shift invariance holds bit-exactly rather than up to rounding
    out = np.sort(x.data.reshape(n, c, h * w), axis=-1).mean(axis=-1)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(g.dtype),)

    return make_node(out, "global_avg_pool", (x,), backward)


# ---------------------------------------------------------------------------
# resampling


@lru_cache(maxsize=256)
def interpolation_matrix(src: int, dst: int, boundary: str = "clamp") -> np.ndarray:
    """(dst, src) linear-interpolation weights with half-pixel centers.

    Source coordinate of output index ``d`` is ``(d + 0.5) * src / dst - 0.5``.
    ``clamp`` pins coordinates to [0, src - 1]; ``circular`` wraps neighbours
    around the torus so the resampling commutes with circular shifts.
    """
    mat = np.zeros((dst, src))
    for d in range(dst):
        s = (d + 0.5) * src / dst - 0.5
        if boundary == "clamp":
            s = min(max(s, 0.0), src - 1.0)
            i0 = int(np.floor(s))
            i1 = min(i0 + 1, src - 1)
        else:
            i0 = int(np.floor(s))
            i1 = i0 + 1
        frac = s - i0
        mat[d, i0 % src] += 1.0 - frac
        mat[d, i1 % src] += frac
    return mat


def bilinear_upsample(
    x: Tensor,
    size: Optional[Tuple[int, int]] = None,
    scale: Optional[int] = None,
    boundary: str = "clamp",
) -> Tensor:
    x = as_tensor(x)
    _check4(x, "bilinear_upsample")
    n, c, h, w = x.shape
    if size is None:
        if scale is None:
            raise ConfigurationError("bilinear_upsample needs either size or scale")
        size = (h * scale, w * scale)
    th, tw = size
    if th < h or tw < w:
        raise ConfigurationError(f"bilinear_upsample cannot downsample {h}x{w} -> {th}x{tw}")
    if boundary not in ("clamp", "circular"):
        raise ConfigurationError(f"unknown boundary mode {boundary!r}")
    if (th, tw) == (h, w):
        return make_node(x.data.copy(), "bilinear_upsample", (x,), lambda g: (g,))
    ah = interpolation_matrix(h, th, boundary).astype(x.dtype)
    aw = interpolation_matrix(w, tw, boundary).astype(x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_node(out, "bilinear_upsample", (x,), backward)


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(logits: Tensor, targets: Union[np.ndarray, Sequence]) -> Tensor:
    """Mean binary cross entropy over every (sample, class) entry, in log-sum-exp form."""
    logits = as_tensor(logits)
    t = np.asarray(targets)
    if t.shape != logits.shape:
        raise DimensionError(f"targets shape {t.shape} != logits shape {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise InputError("bce_with_logits targets must be 0/1")
    z = logits.data
    t = t.astype(z.dtype)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean())
    count = z.size

    def backward(g):
        return (g * (_sigmoid(z) - t) / count,)

    return make_node(out, "bce_with_logits", (logits,), backward)
