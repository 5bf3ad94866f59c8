"""Dense tensors with reverse-mode differentiation over a replayable tape.

Tensors wrap C-contiguous float arrays (float32 for model state by default,
float64 for verification runs via ``dtype_scope``). Operations executed while
a ``GradTape`` is active append one record each; ``GradTape.backward`` replays
the records in exact reverse execution order and accumulates gradients
additively into every tensor that requires them. With no active tape the same
operations run as plain NumPy calls.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _local.dtype = dtype


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default float dtype (e.g. float64 for checks)."""
    previous = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense n-dimensional float array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(default_dtype())
        contiguous = np.ascontiguousarray(arr)
        # ascontiguousarray promotes 0-d to (1,); keep scalars 0-d
        self.data = contiguous.reshape(()) if arr.ndim == 0 else contiguous
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), self.requires_grad)
        return t

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; all routed through the taped ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)

    def abs(self) -> "Tensor":
        return absolute(self)


class GradTape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; operations run inside the ``with`` block are
    recorded. ``backward`` visits the records in exact reverse execution order.
    """

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self

    def record(self, out: Tensor, backward) -> None:
        self._records.append((out, backward))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and replay the tape in reverse."""
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> GradTape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Additive gradient accumulation; copies on first write so no buffer
    aliases another record's output gradient."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.ndim == 0:
        # pin scalar operands to the other operand's dtype so a float64
        # python scalar never promotes a float32 graph
        arr = arr.astype(like.data.dtype)
    elif arr.dtype.type not in FLOAT_DTYPES:
        arr = arr.astype(like.data.dtype if like is not None else default_dtype())
    return Tensor(arr)


def _pair(a, b):
    """Convert a binary op's operands, using whichever is a Tensor as the
    dtype anchor for the other."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    a = as_tensor(a)
    return a, as_tensor(b, like=a)


def randn_param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    """Gaussian-initialized trainable tensor in the default dtype."""
    data = (rng.standard_normal(shape) * scale).astype(default_dtype())
    return Tensor(data, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the input's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive taped operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data + b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def backward(g):
            accumulate_grad(a, _unbroadcast(g, a.data.shape))
            accumulate_grad(b, _unbroadcast(g, b.data.shape))

        tape.record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data - b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def backward(g):
            accumulate_grad(a, _unbroadcast(g, a.data.shape))
            accumulate_grad(b, _unbroadcast(-g, b.data.shape))

        tape.record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data * b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def backward(g):
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

        tape.record(out, backward)
    return out


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = Tensor(a.data / b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def backward(g):
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        tape.record(out, backward)
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data**exponent)
    tape = active_tape()
    if tape is not None and a.requires_grad:
        out.requires_grad = True

        def backward(g):
            accumulate_grad(a, g * exponent * a.data ** (exponent - 1.0))

        tape.record(out, backward)
    return out


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    tape = active_tape()
    if tape is not None and a.requires_grad:
        out.requires_grad = True

        def backward(g):
            accumulate_grad(a, g * np.sign(a.data))

        tape.record(out, backward)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with NumPy's stacked-batch semantics on leading dims."""
    a, b = _pair(a, b)
    out = Tensor(a.data @ b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def backward(g):
            if a.requires_grad:
                ga = g @ b.data.swapaxes(-1, -2)
                accumulate_grad(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = a.data.swapaxes(-1, -2) @ g
                accumulate_grad(b, _unbroadcast(gb, b.data.shape))

        tape.record(out, backward)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    original = a.data.shape
    out = Tensor(a.data.reshape(shape))
    tape = active_tape()
    if tape is not None and a.requires_grad:
        out.requires_grad = True

        def backward(g):
            accumulate_grad(a, g.reshape(original))

        tape.record(out, backward)
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    tape = active_tape()
    if tape is not None and a.requires_grad:
        out.requires_grad = True

        def backward(g):
            accumulate_grad(a, g.transpose(inverse))

        tape.record(out, backward)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    accumulate_grad(t, g[tuple(idx)])

        tape.record(out, backward)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index])
    tape = active_tape()
    if tape is not None and a.requires_grad:
        out.requires_grad = True

        def backward(g):
            full = np.zeros_like(a.data)
            full[index] = g
            accumulate_grad(a, full)

        tape.record(out, backward)
    return out


def gather_rows(table, idx) -> Tensor:
    """out[i...] = table[idx[i...]]; scatter-adds back on the reverse pass."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    out = Tensor(table.data[idx])
    tape = active_tape()
    if tape is not None and table.requires_grad:
        out.requires_grad = True

        def backward(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            accumulate_grad(table, gt)

        tape.record(out, backward)
    return out


def gather_last(a, idx) -> Tensor:
    """Per-row selection: a (R, M), idx (R, k) -> (R, k)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = Tensor(np.take_along_axis(a.data, idx, axis=-1))
    tape = active_tape()
    if tape is not None and a.requires_grad:
        out.requires_grad = True
        rows = np.arange(a.data.shape[0])[:, None]

        def backward(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, idx), g)
            accumulate_grad(a, ga)

        tape.record(out, backward)
    return out


def scatter_rows(src, idx, n_rows: int) -> Tensor:
    """out (n_rows, d) with out[idx[i]] += src[i]; rows not hit stay zero."""
    src = as_tensor(src)
    idx = np.asarray(idx)
    data = np.zeros((n_rows,) + src.data.shape[1:], dtype=src.data.dtype)
    np.add.at(data, idx, src.data)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and src.requires_grad:
        out.requires_grad = True

        def backward(g):
            accumulate_grad(src, g[idx])

        tape.record(out, backward)
    return out


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    # wide accumulator keeps long reductions exact in float32 runs
    data = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and a.requires_grad:
        out.requires_grad = True

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            accumulate_grad(a, np.broadcast_to(g, a.data.shape))

        tape.record(out, backward)
    return out


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    if count == 0:
        raise ValueError("empty reduction")
    data = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and a.requires_grad:
        out.requires_grad = True

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            accumulate_grad(a, np.broadcast_to(g / count, a.data.shape))

        tape.record(out, backward)
    return out
