"""Central finite differences and gradient checking against the tape."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .fce import make_fce
from . import tensor as T
from .tensor import Tape, Tensor, add, concat, mul, mul_broadcast, tsum

# denominators below this are clamped so exact zeros compare on absolute error
REL_FLOOR = 1e-5


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f / d x, one element at a time.

    ``x`` is perturbed in place and restored, so ``f`` may also reach it
    through a closure (e.g. a layer weight).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    data = x.data
    grad = np.zeros(data.shape, dtype=np.float64)
    flat = data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(_value(f(x))).sum())
        flat[i] = orig - h
        fm = float(np.asarray(_value(f(x))).sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def _value(y):
    return y.data if isinstance(y, Tensor) else y


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, REL_FLOOR)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from the
    tensors in ``wrt`` (all of which must require grad).
    """
    for t in wrt:
        t.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    worst = 0.0
    for t in wrt:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = finite_diff_grad(lambda _: f(), t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# Named gradient-check cases.  Each builder takes an rng and returns
# (f, wrt) for check_gradients; everything is float64.


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape).astype(np.float64), requires_grad=True)


def _projected(y: Tensor, seed: int = 1) -> Tensor:
    # fixed random projection keeps the scalar sensitive to every output element
    r = np.random.default_rng(seed).normal(size=y.shape)
    return tsum(mul(y, r))


def _unary_case(op, *shape):
    def build(rng):
        x = _rand(rng, *shape)
        return (lambda: _projected(op(x))), [x]
    return build


def _conv_case(rng):
    x, w, b = _rand(rng, 2, 3, 6, 6), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
    return (lambda: _projected(F.conv2d(x, w, b, stride=2, pad=1))), [x, w, b]


def _conv_groups_case(rng):
    x, w = _rand(rng, 1, 4, 5, 5), _rand(rng, 4, 2, 3, 3)
    return (lambda: _projected(F.conv2d(x, w, None, 1, 1, groups=2))), [x, w]


def _bn_case(training):
    def build(rng):
        x, g, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 3), _rand(rng, 3)
        rm, rv = np.full(3, 0.3), np.full(3, 2.0)
        return (lambda: _projected(F.batchnorm(x, g, b, rm.copy(), rv.copy(), 1e-5, training))), [x, g, b]
    return build


def _binary_case(op, shape_a, shape_b):
    def build(rng):
        a, b = _rand(rng, *shape_a), _rand(rng, *shape_b)
        return (lambda: _projected(op(a, b))), [a, b]
    return build


def _positive_case(op, *shape):
    # domain-restricted ops get inputs in [0.5, 2.5)
    def build(rng):
        x = Tensor(rng.random(shape) * 2.0 + 0.5, requires_grad=True)
        return (lambda: _projected(op(x))), [x]
    return build


def _div_case(rng):
    a = _rand(rng, 2, 3, 4)
    b = Tensor(rng.random((1, 3, 4)) * 2.0 + 0.5, requires_grad=True)
    return (lambda: _projected(T.div(a, b))), [a, b]


def _getitem_case(rng):
    x = _rand(rng, 3, 5, 4)
    idx = (np.array([0, 2, 2]), slice(1, 4), np.array([3, 0, 3]))  # repeated index accumulates
    return (lambda: _projected(T.getitem(x, idx))), [x]


def _split_case(rng):
    x = _rand(rng, 2, 7, 3)
    def f():
        a, b, c = T.split(x, (2, 4, 1), axis=1)
        return add(add(_projected(a, 1), _projected(b, 2)), _projected(c, 3))
    return f, [x]


def _layernorm_case(rng):
    x, g, b = _rand(rng, 2, 8, 1, 1), _rand(rng, 8), _rand(rng, 8)
    return (lambda: _projected(F.layernorm_channels(x, g, b))), [x, g, b]


def _bce_case(rng):
    x = _rand(rng, 2, 3, 4)
    t = (rng.random((2, 3, 4)) > 0.5).astype(np.float64)
    return (lambda: tsum(F.bce_with_logits(x, t))), [x]


def _op_cases() -> dict:
    return {
        "conv2d": _conv_case,
        "conv2d_groups": _conv_groups_case,
        "batchnorm_train": _bn_case(True),
        "batchnorm_eval": _bn_case(False),
        "sigmoid": _unary_case(F.sigmoid, 2, 8, 3, 3),
        "silu": _unary_case(F.silu, 2, 8, 3, 3),
        "relu": _unary_case(F.relu, 2, 8, 3, 3),
        "softmax": _unary_case(lambda x: F.softmax(x, axis=1), 2, 8, 3, 3),
        "global_avg_pool": _unary_case(F.global_avg_pool, 2, 8, 6, 6),
        "maxpool2d": _unary_case(lambda x: F.maxpool2d(x, 5, 1, 2), 2, 4, 6, 6),
        "upsample_nearest": _unary_case(lambda x: F.upsample_nearest(x, 2), 2, 4, 3, 3),
        "block_pool_repeat": _unary_case(lambda x: F.repeat_blocks(F.avg_pool_blocks(x, 2), 2, (5, 5)), 1, 3, 5, 5),
        "concat": _binary_case(lambda a, b: concat([a, b], axis=1), (2, 3, 4, 4), (2, 5, 4, 4)),
        "add": _binary_case(add, (2, 3, 4, 4), (1, 3, 1, 4)),
        "mul_broadcast": _binary_case(mul_broadcast, (2, 8, 6, 6), (2, 8, 1, 1)),
        "sub": _binary_case(T.sub, (2, 3, 4), (3, 1)),
        "mul": _binary_case(T.mul, (2, 3, 4), (1, 3, 4)),
        "div": _div_case,
        "minimum": _binary_case(T.minimum, (2, 3, 4), (2, 3, 4)),
        "maximum": _binary_case(T.maximum, (2, 3, 4), (3, 4)),
        "neg": _unary_case(T.neg, 2, 3, 4),
        "exp": _unary_case(T.exp, 2, 3, 4),
        "log": _positive_case(T.log, 2, 3, 4),
        "sqrt": _positive_case(T.sqrt, 2, 3, 4),
        "power": _positive_case(lambda x: T.power(x, 2.5), 2, 3, 4),
        "abs": _unary_case(T.tabs, 2, 3, 4),
        "clip": _unary_case(lambda x: T.clip(x, -0.5, 0.7), 2, 3, 4),
        "sum_axis": _unary_case(lambda x: T.tsum(x, axis=(0, 2), keepdims=True), 2, 3, 4),
        "mean": _unary_case(lambda x: T.mean(x, axis=1), 2, 3, 4),
        "reshape": _unary_case(lambda x: T.reshape(x, (4, 6)), 2, 3, 4),
        "transpose": _unary_case(lambda x: T.transpose(x, (2, 0, 1)), 2, 3, 4),
        "getitem": _getitem_case,
        "split": _split_case,
        "layernorm_channels": _layernorm_case,
        "bce_with_logits": _bce_case,
    }


def _fce_case(kind: str, **hyper):
    def build(rng):
        c = 8
        block = make_fce(kind, c, rng=rng, **hyper)
        if kind == "GC":
            # canonical zero init of the last transform conv would hide upstream gradients
            block.wv2.data = rng.normal(size=block.wv2.shape) * 0.5
        block.to(np.float64)
        x = _rand(rng, 2, c, 6, 6)
        return (lambda: _projected(block(x))), [x] + block.parameters()
    return build


def _fce_cases() -> dict:
    return {
        "se": _fce_case("SE"),
        "gc": _fce_case("GC", ratio=2),  # width-1 layer norm is constant
        "ge": _fce_case("GE"),
        "ge_extent2": _fce_case("GE", extent=2),
        "gct": _fce_case("GCT"),
    }


def gradient_cases(group: str = "all") -> dict:
    """Registry of named cases: group is "ops", "fce" or "all"."""
    if group == "ops":
        return _op_cases()
    if group == "fce":
        return _fce_cases()
    return {**_op_cases(), **_fce_cases()}


def run_case(name: str, seed: int) -> float:
    build = gradient_cases()[name]
    f, wrt = build(np.random.default_rng(seed))
    return check_gradients(f, wrt)
