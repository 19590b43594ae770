"""Feature Context Excitation blocks: SE, GC, GE and GCT.

All four map an NCHW tensor to a tensor of the same shape.  SE, GE and GCT
rescale channels (or positions, for finite-extent GE) by a gate in (0, 1];
GC adds a transformed global context vector back onto the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import functional as F
from .nn import Module, kaiming_uniform, param
from .tensor import Tensor, add, exp, mean, mul, reshape, sqrt, sub, div, tsum

FCE_KINDS = ("SE", "GC", "GE", "GCT")


def bottleneck_width(channels: int, ratio: int) -> int:
    return max(1, math.ceil(channels / ratio))


@dataclass(frozen=True)
class SEConfig:
    channels: int
    reduction: int = 16
    bias: bool = True

    @property
    def hidden(self) -> int:
        return bottleneck_width(self.channels, self.reduction)


@dataclass(frozen=True)
class GCConfig:
    channels: int
    ratio: int = 16
    eps: float = 1e-5

    @property
    def hidden(self) -> int:
        return bottleneck_width(self.channels, self.ratio)


@dataclass(frozen=True)
class GEConfig:
    channels: int
    extent: Optional[int] = None  # None means global
    parameter_free: bool = True


@dataclass(frozen=True)
class GCTConfig:
    channels: int
    c: float = 2.0
    eps: float = 1e-5


FCEConfig = Union[SEConfig, GCConfig, GEConfig, GCTConfig]
_CONFIGS = {"SE": SEConfig, "GC": GCConfig, "GE": GEConfig, "GCT": GCTConfig}


def make_config(kind: str, channels: int, **hyper) -> FCEConfig:
    try:
        cls = _CONFIGS[kind]
    except KeyError:
        raise ValueError(f"unknown FCE kind {kind!r}; expected one of {FCE_KINDS}") from None
    return cls(channels=channels, **hyper)


def _check_channels(x: Tensor, channels: int) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ValueError(f"expected NCHW input with {channels} channels, got {x.shape}")


class SE(Module):
    """Squeeze (global average pool) and excite (bottleneck MLP + sigmoid)."""

    kind = "SE"

    def __init__(self, cfg: SEConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c, h = cfg.channels, cfg.hidden
        self.w1 = param(kaiming_uniform(rng, (h, c, 1, 1)))
        self.b1 = param(rng.uniform(-1, 1, h).astype(np.float32) / math.sqrt(c)) if cfg.bias else None
        self.w2 = param(kaiming_uniform(rng, (c, h, 1, 1)))
        self.b2 = param(rng.uniform(-1, 1, c).astype(np.float32) / math.sqrt(h)) if cfg.bias else None

    def gate(self, x: Tensor) -> Tensor:
        z = F.global_avg_pool(x)
        hidden = F.relu(F.conv2d(z, self.w1, self.b1))
        return F.sigmoid(F.conv2d(hidden, self.w2, self.b2))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.cfg.channels)
        return F.mul_broadcast(x, self.gate(x))


class GC(Module):
    """Global context block: softmax attention pooling over all positions,
    bottleneck transform with layer norm, additive fusion."""

    kind = "GC"

    def __init__(self, cfg: GCConfig, rng=None, zero_last: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c, h = cfg.channels, cfg.hidden
        # no bias on the key projection: softmax is shift invariant, so it would never learn
        self.wk = param(kaiming_uniform(rng, (1, c, 1, 1)))
        self.wv1 = param(kaiming_uniform(rng, (h, c, 1, 1)))
        self.bv1 = param(rng.uniform(-1, 1, h).astype(np.float32) / math.sqrt(c))
        self.ln_gamma = param(np.ones(h, dtype=np.float32))
        self.ln_beta = param(np.zeros(h, dtype=np.float32))
        w2 = np.zeros((c, h, 1, 1), np.float32) if zero_last else kaiming_uniform(rng, (c, h, 1, 1))
        self.wv2 = param(w2)
        self.bv2 = param(np.zeros(c, np.float32))

    def attention(self, x: Tensor) -> Tensor:
        n, _, hh, ww = x.shape
        logits = reshape(F.conv2d(x, self.wk), (n, 1, hh * ww))
        return reshape(F.softmax(logits, axis=-1), (n, 1, hh, ww))

    def context(self, x: Tensor) -> Tensor:
        return tsum(mul(x, self.attention(x)), axis=(2, 3), keepdims=True)

    def transform(self, ctx: Tensor) -> Tensor:
        t = F.conv2d(ctx, self.wv1, self.bv1)
        t = F.relu(F.layernorm_channels(t, self.ln_gamma, self.ln_beta, self.cfg.eps))
        return F.conv2d(t, self.wv2, self.bv2)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.cfg.channels)
        return add(x, self.transform(self.context(x)))


class GE(Module):
    """Parameter-free gather-excite: average-pool gather, sigmoid excite."""

    kind = "GE"

    def __init__(self, cfg: GEConfig, rng=None):
        if not cfg.parameter_free:
            raise ValueError("only the parameter-free gather-excite variant is supported")
        if cfg.extent is not None and cfg.extent < 1:
            raise ValueError(f"extent must be a positive integer or None, got {cfg.extent}")
        self.cfg = cfg

    def gate(self, x: Tensor) -> Tensor:
        e = self.cfg.extent
        h, w = x.shape[2:]
        if e is None or e >= max(h, w):
            return F.sigmoid(F.global_avg_pool(x))
        g = F.avg_pool_blocks(x, e)
        return F.sigmoid(F.repeat_blocks(g, e, (h, w)))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.cfg.channels)
        return mul(x, self.gate(x))


class GCT(Module):
    """Gaussian context transformer: channel-normalized global descriptors
    passed through a fixed Gaussian, exp(-z^2 / (2 c^2))."""

    kind = "GCT"

    def __init__(self, cfg: GCTConfig, rng=None):
        if cfg.c <= 0:
            raise ValueError("Gaussian width c must be positive")
        self.cfg = cfg

    def normalized(self, x: Tensor) -> Tensor:
        z = F.global_avg_pool(x)
        d = sub(z, mean(z, axis=1, keepdims=True))
        std = sqrt(mean(mul(d, d), axis=1, keepdims=True))
        return div(d, add(std, self.cfg.eps))

    def gate(self, x: Tensor) -> Tensor:
        zn = self.normalized(x)
        return exp(mul(mul(zn, zn), -1.0 / (2.0 * self.cfg.c ** 2)))

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.cfg.channels)
        return F.mul_broadcast(x, self.gate(x))


_LAYERS = {"SE": SE, "GC": GC, "GE": GE, "GCT": GCT}


def make_fce(kind: str, channels: int, rng=None, **hyper) -> Module:
    cfg = make_config(kind, channels, **hyper)
    return _LAYERS[kind](cfg, rng=rng)


def se_forward(x: Tensor, block: SE) -> Tensor:
    return block(x)


def gc_forward(x: Tensor, block: GC) -> Tensor:
    return block(x)


def ge_forward(x: Tensor, block: GE) -> Tensor:
    return block(x)


def gct_forward(x: Tensor, block: GCT) -> Tensor:
    return block(x)


def fce_param_count(kind: str, channels: int, cfg: Optional[FCEConfig] = None) -> int:
    """Learnable scalars of one block, from the closed-form layout."""
    cfg = cfg or make_config(kind, channels)
    c = channels
    if kind == "SE":
        h = cfg.hidden
        return c * h + h * c + ((h + c) if cfg.bias else 0)
    if kind == "GC":
        h = cfg.hidden
        return c + (c * h + h) + 2 * h + (h * c + c)
    if kind in ("GE", "GCT"):
        return 0
    raise ValueError(f"unknown FCE kind {kind!r}")


def fce_flops(kind: str, channels: int, h: int, w: int, cfg: Optional[FCEConfig] = None,
              elementwise: bool = True) -> int:
    """FLOPs of one block on an h x w map (batch 1).

    Dense 1x1 maps count 2 per multiply-accumulate plus one per bias add;
    pooling, gating and normalization count one per element when
    ``elementwise`` is set.
    """
    cfg = cfg or make_config(kind, channels)
    c, hw = channels, h * w
    if kind == "SE":
        hd = cfg.hidden
        dense = 2 * c * hd * 2 + ((hd + c) if cfg.bias else 0)
        ew = c * hw + hd + c + c * hw  # pool, relu, sigmoid, scale
    elif kind == "GC":
        hd = cfg.hidden
        dense = 2 * c * hw + 2 * c * hw + 2 * c * hd + hd + 2 * hd * c + c  # key, weighted sum, transform
        ew = 3 * hw + 4 * hd + hd + c * hw  # softmax, layernorm, relu, residual add
    elif kind == "GE":
        dense = 0
        ew = c * hw + (c if cfg.extent is None else c * hw) + c * hw
    elif kind == "GCT":
        dense = 0
        ew = c * hw + 6 * c + c * hw
    else:
        raise ValueError(f"unknown FCE kind {kind!r}")
    return dense + (ew if elementwise else 0)
