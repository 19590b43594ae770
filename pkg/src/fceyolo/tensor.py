"""Dense tensor with tape-based reverse-mode autodiff.

Operations record themselves on the active :class:`Tape` (if any) when at
least one input requires a gradient.  Outside a ``with Tape():`` block nothing
is recorded, which doubles as the inference / no-grad mode.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """Array wrapper carrying an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations.

    Execution order is a topological order of the graph, so walking the
    records backwards visits every node after all of its consumers.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, BackwardFn]] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, parents: tuple, fn: BackwardFn) -> None:
        self.records.append((out, parents, fn))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every leaf that requires a gradient.

        Gradients accumulate into existing ``.grad`` arrays.
        """
        if grad is None:
            if output.size != 1:
                raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
            grad = np.ones_like(output.data)
        produced = {id(out) for out, _, _ in self.records}
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=output.dtype)}
        leaves: dict[int, Tensor] = {}
        if id(output) not in produced and output.requires_grad:
            leaves[id(output)] = output
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise RuntimeError(f"gradient shape {pg.shape} != tensor shape {p.shape}")
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
                if key not in produced:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, even inside an enclosing tape."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def backward(tape: Tape, output: Tensor) -> None:
    tape.backward(output)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(x, like: np.ndarray) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=like.dtype)


def result(data: np.ndarray, parents: tuple, fn: BackwardFn, op: str = "op") -> Tensor:
    """Wrap an op output and record it when any parent needs a gradient."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def _binary(a, b, fwd, da, db, op):
    ref = a.data if isinstance(a, Tensor) else b.data
    av, bv = _const(a, ref), _const(b, ref)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fwd(av, bv)

    def backward_fn(g):
        ga = unbroadcast(da(g, av, bv, out), av.shape) if isinstance(a, Tensor) else None
        gb = unbroadcast(db(g, av, bv, out), bv.shape) if isinstance(b, Tensor) else None
        return ga, gb

    return result(out, (a, b), backward_fn, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, *_: g, lambda g, *_: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
        "div",
    )


def minimum(a, b) -> Tensor:
    # ties route the gradient to the first argument
    return _binary(
        a, b, np.minimum,
        lambda g, x, y, o: g * (x <= y),
        lambda g, x, y, o: g * (x > y),
        "minimum",
    )


def maximum(a, b) -> Tensor:
    return _binary(
        a, b, np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
        "maximum",
    )


def mul_broadcast(x: Tensor, gate: Tensor) -> Tensor:
    """Scale an NCHW map by a per-channel (N,C,1,1) gate."""
    if gate.ndim != 4 or gate.shape[:2] != x.shape[:2] or gate.shape[2:] != (1, 1):
        raise ValueError(f"gate shape {gate.shape} incompatible with {x.shape}")
    return mul(x, gate)


def _unary(x: Tensor, out: np.ndarray, dfn, op: str) -> Tensor:
    return result(out, (x,), lambda g: (dfn(g),), op)


def neg(x: Tensor) -> Tensor:
    return _unary(x, -x.data, lambda g: -g, "neg")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out, "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _unary(x, out, lambda g: g / x.data, "log")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    # zero subgradient at the origin instead of inf
    return _unary(x, out, lambda g: np.divide(0.5 * g, out, out=np.zeros_like(g), where=out > 0), "sqrt")


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p
    return _unary(x, out, lambda g: g * p * x.data ** (p - 1), "power")


def tabs(x: Tensor) -> Tensor:
    return _unary(x, np.abs(x.data), lambda g: g * np.sign(x.data), "abs")


def clip(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        mask &= x.data >= lo
    if hi is not None:
        mask &= x.data <= hi
    return _unary(x, out, lambda g: g * mask, "clip")


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return result(np.asarray(out), (x,), backward_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    return result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    return result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward_fn(g):
        full = np.zeros_like(x.data)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return result(np.array(out, copy=True), (x,), backward_fn, "getitem")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ValueError("concat of empty sequence")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat shape mismatch: {t.shape} vs {ref}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return result(out, tuple(xs), backward_fn, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {x.shape[axis]}")
    outs, start = [], 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        outs.append(getitem(x, tuple(sl)))
        start += n
    return outs


# ------------------------------------------------------------------- dump I/O


def dump_bytes(arr: np.ndarray) -> bytes:
    """Serialize as: rank (u64 LE), extents (u64 LE each), float32 LE payload."""
    arr = np.asarray(arr)
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def load_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`dump_bytes`; returns the array and the next offset."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    n = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
    return arr, offset + 4 * n


def save_tensor(path, t) -> None:
    with open(path, "wb") as f:
        f.write(dump_bytes(t.data if isinstance(t, Tensor) else t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        arr, _ = load_bytes(f.read())
    return Tensor(arr)


def parameters_of(ts: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in ts if t.requires_grad]
