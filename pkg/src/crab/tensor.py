"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable primitive used by the model lives here. Operations
execute eagerly on numpy arrays; when a :class:`Tape` is active, each op
appends a record (inputs, output, backward rule) in execution order, which
is automatically a topological order. ``backward`` walks the tape once in
reverse and accumulates gradients into ``Tensor.grad``.

Production code runs in float32. Tests that need tighter tolerances can
switch the whole stack to float64 via :func:`default_dtype`.

Any forward op that produces NaN/Inf from finite inputs raises
:class:`~crab.errors.NumericError` instead of propagating silently.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DomainError,
    NumericError,
    ShapeError,
)

_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPE: Optional["Tape"] = None

# Additive pre-softmax penalty for masked positions. Large enough that
# exp(-BIG) underflows to zero after max-subtraction, small enough to stay
# finite in float32.
MASK_FILL = 1e9


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the default float width (float64 test mode)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense float array, optionally carrying a gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the functional forms below do the real work
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class TapeOp:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Per-step record of executed ops, in execution (= topological) order."""

    def __init__(self):
        self.ops: list[TapeOp] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

        Repeated calls accumulate. Each recorded op is visited exactly once,
        in reverse execution order.
        """
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = pending.pop(id(op.out), None)
            if g is None:
                continue
            for inp, ig in zip(op.inputs, op.backward_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = pending.get(key)
                pending[key] = ig if prev is None else prev + ig
        # whatever is left was produced outside this tape: the leaves
        for op in self.ops:
            for inp in op.inputs:
                g = pending.pop(id(inp), None)
                if g is not None:
                    inp.accumulate_grad(g)
        # a loss that is itself a leaf (no recorded producer)
        g = pending.pop(id(loss), None)
        if g is not None and loss.requires_grad:
            loss.accumulate_grad(g)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation on the active tape."""
    if _ACTIVE_TAPE is None:
        raise ContractError("backward requires an active tape")
    _ACTIVE_TAPE.backward(loss)


def _result(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple],
    op: str,
) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.ops.append(TapeOp(tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x):
    """Split an operand into (raw array/scalar, Tensor-or-None)."""
    if isinstance(x, Tensor):
        return x.data, x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return x, None
    if isinstance(x, np.ndarray):
        return x, None
    raise ContractError(f"unsupported operand type {type(x).__name__}")


def _broadcast_check(a_shape, b, op: str):
    b_shape = b.shape if hasattr(b, "shape") else ()
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a_data, a_t = _operand(a)
    b_data, b_t = _operand(b)
    try:
        data = a_data + b_data
    except ValueError:
        raise ShapeError(
            f"add: shapes {np.shape(a_data)} and {np.shape(b_data)} do not broadcast"
        ) from None
    inputs = tuple(t for t in (a_t, b_t) if t is not None)

    def backward_fn(g):
        grads = []
        if a_t is not None:
            grads.append(_unbroadcast(g, a_t.data.shape))
        if b_t is not None:
            grads.append(_unbroadcast(g, b_t.data.shape))
        return tuple(grads)

    return _result(data, inputs, backward_fn, "add")


def sub(a, b) -> Tensor:
    a_data, a_t = _operand(a)
    b_data, b_t = _operand(b)
    try:
        data = a_data - b_data
    except ValueError:
        raise ShapeError(
            f"sub: shapes {np.shape(a_data)} and {np.shape(b_data)} do not broadcast"
        ) from None
    inputs = tuple(t for t in (a_t, b_t) if t is not None)

    def backward_fn(g):
        grads = []
        if a_t is not None:
            grads.append(_unbroadcast(g, a_t.data.shape))
        if b_t is not None:
            grads.append(_unbroadcast(-g, b_t.data.shape))
        return tuple(grads)

    return _result(data, inputs, backward_fn, "sub")


def mul(a, b) -> Tensor:
    a_data, a_t = _operand(a)
    b_data, b_t = _operand(b)
    try:
        data = a_data * b_data
    except ValueError:
        raise ShapeError(
            f"mul: shapes {np.shape(a_data)} and {np.shape(b_data)} do not broadcast"
        ) from None
    inputs = tuple(t for t in (a_t, b_t) if t is not None)

    def backward_fn(g):
        grads = []
        if a_t is not None:
            grads.append(_unbroadcast(g * b_data, a_t.data.shape))
        if b_t is not None:
            grads.append(_unbroadcast(g * a_data, b_t.data.shape))
        return tuple(grads)

    return _result(data, inputs, backward_fn, "mul")


def div(a, b) -> Tensor:
    a_data, a_t = _operand(a)
    b_data, b_t = _operand(b)
    try:
        data = a_data / b_data
    except ValueError:
        raise ShapeError(
            f"div: shapes {np.shape(a_data)} and {np.shape(b_data)} do not broadcast"
        ) from None
    inputs = tuple(t for t in (a_t, b_t) if t is not None)

    def backward_fn(g):
        grads = []
        if a_t is not None:
            grads.append(_unbroadcast(g / b_data, a_t.data.shape))
        if b_t is not None:
            grads.append(_unbroadcast(-g * a_data / (b_data * b_data), b_t.data.shape))
        return tuple(grads)

    return _result(data, inputs, backward_fn, "div")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    data = x.data * s

    def backward_fn(g):
        return (g * s,)

    return _result(data, (x,), backward_fn, "scale")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward_fn(g):
        return (g * (x.data > 0),)

    return _result(data, (x,), backward_fn, "relu")


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    _check_finite(data, "exp")

    def backward_fn(g):
        return (g * data,)

    return _result(data, (x,), backward_fn, "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DomainError("log requires strictly positive inputs")
    data = np.log(x.data)

    def backward_fn(g):
        return (g / x.data,)

    return _result(data, (x,), backward_fn, "log")


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise DomainError("sqrt requires non-negative inputs")
    data = np.sqrt(x.data)

    def backward_fn(g):
        return (g / (2.0 * data),)

    return _result(data, (x,), backward_fn, "sqrt")


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - data * data),)

    return _result(data, (x,), backward_fn, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid_raw(x.data)

    def backward_fn(g):
        return (g * data * (1.0 - data),)

    return _result(data, (x,), backward_fn, "sigmoid")


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x saturates cleanly to 0, so just
    # silence the warning rather than branch on sign
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# matmul / softmax / reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul expects Tensor operands")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} x {b.shape}"
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul batch dimensions do not broadcast: {a.shape} x {b.shape}"
        ) from None
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        a_data, b_data = a.data, b.data
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a_data.shape)
        if b_data.ndim == 2 and g.ndim > 2:
            # weight gradient of a batched-by-2D product: collapse the batch
            # dims into one GEMM instead of a batched GEMM plus a sum
            k, n = b_data.shape
            gb = np.matmul(a_data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a_data, -1, -2), g), b_data.shape)
        return (ga, gb)

    return _result(data, (a, b), backward_fn, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    _validate_axis(x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        inner = np.sum(g * data, axis=axis, keepdims=True)
        return ((g - inner) * data,)

    return _result(data, (x,), backward_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _validate_axis(x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    data = shifted - lse

    def backward_fn(g):
        return (g - np.exp(data) * np.sum(g, axis=axis, keepdims=True),)

    return _result(data, (x,), backward_fn, "log_softmax")


def _validate_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")


def _expand_mask(mask: np.ndarray, x: Tensor, axis: int) -> np.ndarray:
    """Append trailing singleton dims so the mask broadcasts against x."""
    mask = np.asarray(mask, dtype=x.data.dtype)
    while mask.ndim < x.ndim:
        mask = mask[..., None]
    _broadcast_check(x.shape, mask, "masked reduce")
    return mask


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False, mask=None) -> Tensor:
    if axis is not None:
        _validate_axis(x, axis)
    if mask is not None:
        m = _expand_mask(mask, x, axis)
        data = np.sum(x.data * m, axis=axis, keepdims=keepdims)

        def backward_fn(g):
            gg = g if keepdims or axis is None else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, x.data.shape) * m,)

        return _result(data, (x,), backward_fn, "reduce_sum")

    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _result(data, (x,), backward_fn, "reduce_sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False, mask=None) -> Tensor:
    """Mean over an axis; with a 0/1 mask, mean over valid positions only."""
    if axis is not None:
        _validate_axis(x, axis)
    if mask is not None:
        if axis is None:
            raise ContractError("masked mean requires an explicit axis")
        m = _expand_mask(mask, x, axis)
        counts = np.sum(m, axis=axis, keepdims=True)
        if (counts == 0).any():
            raise DegenerateInputError("masked mean over a row with no valid positions")
        data = np.sum(x.data * m, axis=axis, keepdims=keepdims) / (
            counts if keepdims else np.squeeze(counts, axis=axis)
        )

        def backward_fn(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg / counts, x.data.shape) * m,)

        return _result(data, (x,), backward_fn, "reduce_mean")

    n = x.data.size if axis is None else x.data.shape[axis]
    data = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape) / n,)

    return _result(data, (x,), backward_fn, "reduce_mean")


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError("concat operands must have equal rank")
        for d in range(ref.ndim):
            if d != axis % ref.ndim and t.shape[d] != ref.shape[d]:
                raise ShapeError(
                    f"concat operands disagree on non-concat dim {d}: "
                    f"{ref.shape} vs {t.shape}"
                )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis % ref.ndim] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis % ref.ndim] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _result(data, tuple(tensors), backward_fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("stack requires at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("stack operands must share the same shape")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(data, tuple(tensors), backward_fn, "stack")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _validate_axis(x, axis)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = x.data[sl]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _result(data, (x,), backward_fn, "slice_axis")


def index_axis(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along an axis, dropping that axis."""
    _validate_axis(x, axis)
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)
    data = x.data[sl]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _result(data, (x,), backward_fn, "index_axis")


def take_per_row(x: Tensor, cols: np.ndarray) -> Tensor:
    """out[b] = x[b, cols[b]] for a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError("take_per_row expects a 2-D tensor")
    cols = np.asarray(cols)
    if cols.shape != (x.shape[0],):
        raise ShapeError("one column index per row required")
    if (cols < 0).any() or (cols >= x.shape[1]).any():
        raise ContractError("column index out of range")
    rows = np.arange(x.shape[0])
    data = x.data[rows, cols]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _result(data, (x,), backward_fn, "take_per_row")


def transpose_last(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("transpose_last requires at least 2 dimensions")
    data = np.swapaxes(x.data, -1, -2)

    def backward_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _result(data, (x,), backward_fn, "transpose_last")


def transpose_axes(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"axes {axes} is not a permutation for rank {x.ndim}")
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _result(data, (x,), backward_fn, "transpose_axes")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.data.shape),)

    return _result(data, (x,), backward_fn, "reshape")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / ||x||_2 along ``axis``; eps keeps the zero vector differentiable."""
    _validate_axis(x, axis)
    sq = reduce_sum(mul(x, x), axis=axis, keepdims=True)
    norm = sqrt(add(sq, eps))
    return div(x, norm)


def constant(data, dtype=None) -> Tensor:
    """A tensor that never tracks gradients (labels, masks, targets)."""
    return Tensor(data, requires_grad=False, dtype=dtype)
