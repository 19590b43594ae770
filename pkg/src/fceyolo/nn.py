"""Layer containers and the YOLOv8 building blocks (Conv, Bottleneck, C2f, SPPF, Detect)."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, add, concat, split


class Module:
    """Minimal layer container.

    Tensors with ``requires_grad`` set are parameters, bare numpy arrays are
    buffers (running statistics), and Module attributes (or lists of them) are
    children.  Traversal follows attribute insertion order, so names and
    ordering are deterministic.
    """

    training = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{k}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + k, v
        for k, m in self._children():
            yield from m.named_parameters(f"{prefix}{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in vars(self).items():
            if isinstance(v, np.ndarray):
                yield prefix + k, v
        for k, m in self._children():
            yield from m.named_buffers(f"{prefix}{k}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, m in self._children():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for m in self.modules():
            for k, v in list(vars(m).items()):
                if isinstance(v, Tensor) and v.requires_grad:
                    v.data = v.data.astype(dtype)
                    v.grad = None
                elif isinstance(v, np.ndarray) and v.dtype.kind == "f":
                    setattr(m, k, v.astype(dtype))
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())


def param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, dtype=np.float32) -> np.ndarray:
    # PyTorch's default conv init: kaiming_uniform with a=sqrt(5) -> bound 1/sqrt(fan_in)
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def autopad(k: int, p: Optional[int] = None) -> int:
    return k // 2 if p is None else p


class Conv2d(Module):
    """Plain convolution with optional bias."""

    def __init__(self, c1, c2, k=1, s=1, p=None, groups=1, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c1, self.c2, self.k, self.s, self.p, self.groups = c1, c2, k, s, autopad(k, p), groups
        self.weight = param(kaiming_uniform(rng, (c2, c1 // groups, k, k)))
        if bias:
            bound = 1.0 / math.sqrt(c1 // groups * k * k)
            self.bias = param(rng.uniform(-bound, bound, size=c2).astype(np.float32))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.s, self.p, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-3, momentum=0.03):
        self.eps, self.momentum = eps, momentum
        self.gamma = param(np.ones(c, dtype=np.float32))
        self.beta = param(np.zeros(c, dtype=np.float32))
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            self.last_count = x.size // x.shape[1]  # samples per channel in the last batch
        return F.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.eps, self.training, self.momentum,
        )


class ConvBNSiLU(Module):
    """Bias-free convolution, batch norm, SiLU."""

    def __init__(self, c1, c2, k=1, s=1, p=None, groups=1, act=True, rng=None):
        self.conv = Conv2d(c1, c2, k, s, p, groups, bias=False, rng=rng)
        self.bn = BatchNorm2d(c2)
        self.act = act
        self.c1, self.c2 = c1, c2

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return F.silu(y) if self.act else y


class Bottleneck(Module):
    def __init__(self, c1, c2, shortcut=True, k=(3, 3), e=1.0, rng=None):
        c_ = int(c2 * e)
        self.cv1 = ConvBNSiLU(c1, c_, k[0], 1, rng=rng)
        self.cv2 = ConvBNSiLU(c_, c2, k[1], 1, rng=rng)
        self.add = shortcut and c1 == c2

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return add(x, y) if self.add else y


class C2f(Module):
    """CSP bottleneck with two convolutions: project to 2c, split, chain n
    bottlenecks on the second half, concatenate every intermediate, project out."""

    def __init__(self, c1, c2, n=1, shortcut=False, e=0.5, rng=None):
        self.c = int(c2 * e)
        self.cv1 = ConvBNSiLU(c1, 2 * self.c, 1, 1, rng=rng)
        self.cv2 = ConvBNSiLU((2 + n) * self.c, c2, 1, rng=rng)
        self.m = [Bottleneck(self.c, self.c, shortcut, rng=rng) for _ in range(n)]

    def forward(self, x: Tensor) -> Tensor:
        ys = split(self.cv1(x), [self.c, self.c], axis=1)
        for b in self.m:
            ys.append(b(ys[-1]))
        return self.cv2(concat(ys, axis=1))


class SPPF(Module):
    def __init__(self, c1, c2, k=5, rng=None):
        c_ = c1 // 2
        self.k = k
        self.cv1 = ConvBNSiLU(c1, c_, 1, 1, rng=rng)
        self.cv2 = ConvBNSiLU(c_ * 4, c2, 1, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(F.maxpool2d(y[-1], self.k, 1, self.k // 2))
        return self.cv2(concat(y, axis=1))


class Detect(Module):
    """Decoupled anchor-free head: per level a box branch (4*reg_max DFL logits)
    and a class branch (nc logits), concatenated along channels."""

    def __init__(self, nc, ch, reg_max=16, cls_prior=0.01, dfl_decay=1.0, rng=None):
        self.nc, self.reg_max, self.nl = nc, reg_max, len(ch)
        c2 = max(16, ch[0] // 4, reg_max * 4)
        c3 = max(ch[0], min(nc, 100))
        self.box = [
            [ConvBNSiLU(x, c2, 3, rng=rng), ConvBNSiLU(c2, c2, 3, rng=rng), Conv2d(c2, 4 * reg_max, 1, rng=rng)]
            for x in ch
        ]
        self.cls = [
            [ConvBNSiLU(x, c3, 3, rng=rng), ConvBNSiLU(c3, c3, 3, rng=rng), Conv2d(c3, nc, 1, rng=rng)]
            for x in ch
        ]
        # flatten so Module traversal sees them
        self.box = [_Seq(b) for b in self.box]
        self.cls = [_Seq(c) for c in self.cls]
        prior_bias = -math.log((1 - cls_prior) / cls_prior)
        # bin k starts at logit -dfl_decay * k, so initial boxes are small rather
        # than (reg_max - 1) / 2 strides per side; 0 gives the uniform start
        box_bias = np.tile(-dfl_decay * np.arange(reg_max, dtype=np.float32), 4)
        for b, c in zip(self.box, self.cls):
            b.layers[-1].bias.data[:] = box_bias
            c.layers[-1].bias.data[:] = prior_bias

    def forward(self, xs: list[Tensor]) -> list[Tensor]:
        return [concat([b(x), c(x)], axis=1) for x, b, c in zip(xs, self.box, self.cls)]


class _Seq(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for m in self.layers:
            x = m(x)
        return x
