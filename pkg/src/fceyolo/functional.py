"""Neural-network operations on NCHW tensors (forward + backward)."""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, concat, mean, result, sqrt, sub, div, mul, add, mul_broadcast

__all__ = [
    "conv2d", "batchnorm", "activation", "sigmoid", "silu", "relu", "softmax",
    "global_avg_pool", "avg_pool_blocks", "repeat_blocks", "maxpool2d",
    "upsample_nearest", "layernorm_channels", "bce_with_logits", "concat",
    "mul_broadcast",
]


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) with optional bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if stride < 1 or pad < 0 or groups < 1:
        raise ValueError("stride must be >= 1, pad >= 0, groups >= 1")
    if c % groups or cout % groups or cg != c // groups:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {w.shape}, groups {groups}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} != ({cout},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{wd}")

    xp = _pad(x.data, pad)
    wv = w.data
    og = cout // groups
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0

    def fwd_group(gi: int) -> np.ndarray:
        xs = xp[:, gi * cg : (gi + 1) * cg]
        ws = wv[gi * og : (gi + 1) * og]
        if pointwise:
            return np.tensordot(ws[:, :, 0, 0], xs, axes=([1], [1])).transpose(1, 0, 2, 3)
        win = _windows(xs, kh, kw, stride, ho, wo)
        return np.tensordot(win, ws, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    if groups == 1:
        out = fwd_group(0)
    else:
        out = np.concatenate([fwd_group(gi) for gi in range(groups)], axis=1)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wv) if w.requires_grad else None
        for gi in range(groups):
            gs = g[:, gi * og : (gi + 1) * og]
            xs = xp[:, gi * cg : (gi + 1) * cg]
            ws = wv[gi * og : (gi + 1) * og]
            if gw is not None:
                if pointwise:
                    gw[gi * og : (gi + 1) * og, :, 0, 0] = np.tensordot(gs, xs, axes=([0, 2, 3], [0, 2, 3]))
                else:
                    win = _windows(xs, kh, kw, stride, ho, wo)
                    gw[gi * og : (gi + 1) * og] = np.tensordot(gs, win, axes=([0, 2, 3], [0, 2, 3]))
            if gx is not None:
                tgt = gx[:, gi * cg : (gi + 1) * cg]
                for i in range(kh):
                    for j in range(kw):
                        contrib = np.tensordot(ws[:, :, i, j], gs, axes=([0], [1])).transpose(1, 0, 2, 3)
                        tgt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += contrib
        if gx is not None and pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    return result(out, (x, w, b), backward_fn, "conv2d")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    training: bool = False,
    momentum: float = 0.03,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place: ``running = (1 - momentum) * running + momentum * batch``
    (unbiased variance for the running estimate).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batchnorm parameters do not match {c} channels")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    xv = x.data
    shp = (1, c, 1, 1)
    if training:
        m = xv.size // c
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        m = None
        mu, var = running_mean, running_var
    if np.any(var + eps <= 0):
        raise FloatingPointError("batchnorm variance + eps must be positive")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu.reshape(shp)) * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward_fn(g: np.ndarray):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shp)
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shp)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shp)
                gx = (inv.reshape(shp) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(shp)
        return gx, ggamma, gbeta

    return result(out.astype(xv.dtype, copy=False), (x, gamma, beta), backward_fn, "batchnorm")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # stable for large |v|
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = x.data * s
    return result(out, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),), "silu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_ACTIVATIONS = {"sigmoid": sigmoid, "silu": silu, "relu": relu}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return result(y, (x,), backward_fn, "softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"global_avg_pool expects NCHW, got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


def avg_pool_blocks(x: Tensor, e: int) -> Tensor:
    """Mean over non-overlapping e x e blocks; edge blocks average only valid pixels."""
    n, c, h, w = x.shape
    hb, wb = -(-h // e), -(-w // e)
    ph, pw = hb * e - h, wb * e - w
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)))
    counts = np.pad(np.ones((h, w), dtype=x.dtype), ((0, ph), (0, pw)))
    counts = counts.reshape(hb, e, wb, e).sum(axis=(1, 3))
    out = xp.reshape(n, c, hb, e, wb, e).sum(axis=(3, 5)) / counts

    def backward_fn(g):
        gb = g / counts
        full = np.repeat(np.repeat(gb, e, axis=2), e, axis=3)
        return (full[:, :, :h, :w],)

    return result(out, (x,), backward_fn, "avg_pool_blocks")


def repeat_blocks(x: Tensor, e: int, size: tuple) -> Tensor:
    """Nearest-neighbour replication of each cell into an e x e block, cropped to ``size``."""
    h, w = size
    n, c, hb, wb = x.shape
    if hb * e < h or wb * e < w:
        raise ValueError(f"blocks {hb}x{wb} of extent {e} cannot cover {h}x{w}")
    out = np.repeat(np.repeat(x.data, e, axis=2), e, axis=3)[:, :, :h, :w]

    def backward_fn(g):
        gp = np.zeros((n, c, hb * e, wb * e), dtype=g.dtype)
        gp[:, :, :h, :w] = g
        return (gp.reshape(n, c, hb, e, wb, e).sum(axis=(3, 5)),)

    return result(np.ascontiguousarray(out), (x,), backward_fn, "repeat_blocks")


def maxpool2d(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"maxpool window {k} too large for {h}x{w} with pad {pad}")
    xp = _pad(x.data, pad, value=-np.inf)
    win = _windows(xp, k, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                sel = g * (arg == i * k + j)
                gp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += sel
        if pad:
            gp = gp[:, :, pad:-pad, pad:-pad]
        return (gp,)

    return result(np.ascontiguousarray(out), (x,), backward_fn, "maxpool2d")


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def backward_fn(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return result(out, (x,), backward_fn, "upsample_nearest")


def layernorm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample over all non-batch axes (channels), then apply a
    per-channel affine.  Population variance, eps inside the square root."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    axes = tuple(range(1, x.ndim))
    centered = sub(x, mean(x, axis=axes, keepdims=True))
    var = mean(mul(centered, centered), axis=axes, keepdims=True)
    xhat = div(centered, sqrt(add(var, eps)))
    shp = (1, -1) + (1,) * (x.ndim - 2)
    return add(mul(xhat, gamma.reshape(shp)), beta.reshape(shp))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {z.shape}")
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return result(out, (logits,), lambda g: (g * (_sigmoid_np(z) - t),), "bce_with_logits")
