"""Dense numpy-backed tensors with tape-based reverse-mode gradients.

Every differentiable operation appends a record (output, inputs, gradient rule)
to the active :class:`Tape`.  :func:`backward` replays the records of that tape
in reverse order starting at the loss, then clears the tape so that a second
call without a fresh forward pass fails loudly.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

__all__ = [
    "Tensor", "Tape", "TapeError", "NonFiniteError", "DomainError",
    "no_grad", "current_tape", "backward", "as_tensor",
    "add", "sub", "mul", "div", "neg", "scalar_mul", "power", "sqrt", "exp", "log",
    "sigmoid", "log_sigmoid", "softplus", "relu", "clamp_min",
    "sum", "mean", "std", "softmax", "logsumexp",
    "matmul", "reshape", "transpose", "broadcast_to", "concat", "take",
    "conv2d", "global_avg_pool", "batchnorm2d",
]


class TapeError(RuntimeError):
    """Raised for misuse of the gradient tape (empty, consumed, non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(message or f"non-finite values produced by '{op}'")


class DomainError(ValueError):
    """Raised when an input lies outside the domain of an operation."""


class Tape:
    """Ordered record of executed operations.

    Usable as a context manager; inside the ``with`` block it becomes the
    current tape of the calling thread.
    """

    def __init__(self) -> None:
        self._records: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.generation = 0

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], grad_fn: Callable) -> int:
        self._records.append((out, parents, grad_fn))
        return len(self._records) - 1

    def clear(self) -> None:
        self._records.clear()
        self.generation += 1

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = [Tape()]
        _local.grad_enabled = True
    return _local.tapes


def current_tape() -> Tape:
    return _stack()[-1]


def _grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (evaluation, constants)."""
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)


class Tensor:
    """Dense n-dimensional array of floats with an optional gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[tuple[Tape, int, int]] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ---------------------------------------------------------------- operators
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    requires = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires)
    if requires:
        tape = current_tape()
        idx = tape.record(out, tuple(parents), grad_fn)
        out._node = (tape, tape.generation, idx)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; the tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise TapeError("empty tape: loss was not produced by a recorded operation")
    tape, generation, index = loss._node
    if generation != tape.generation or len(tape) == 0:
        raise TapeError("tape already consumed; run the forward pass again before backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    recorded = {id(rec[0]) for rec in tape._records[: index + 1]}
    for out, parents, grad_fn in reversed(tape._records[: index + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for parent, pg in zip(parents, grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in recorded:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            else:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    tape.clear()


# ---------------------------------------------------------------- elementwise
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), grad_fn, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scalar_mul(a: ArrayLike, k: float) -> Tensor:
    a = as_tensor(a)
    k = float(k)
    return _result(a.data * k, (a,), lambda g: (g * k,), "scalar_mul")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    if not p.is_integer() and np.any(a.data <= 0):
        raise DomainError(f"fractional power {p} of non-positive input")

    def grad_fn(g):
        return (g * p * a.data ** (p - 1),)

    return _result(a.data ** p, (a,), grad_fn, "power")


def sqrt(a: ArrayLike) -> Tensor:
    return power(a, 0.5)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive input")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp never sees a positive argument
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def log_sigmoid(a: ArrayLike) -> Tensor:
    """log(sigmoid(x)) evaluated as -softplus(-x)."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _result(out, (a,), lambda g: (g * _sigmoid(-a.data),), "log_sigmoid")


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > floor
    return _result(np.maximum(a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def relu(a: ArrayLike) -> Tensor:
    return clamp_min(a, 0.0)


# ----------------------------------------------------------------- reductions
def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    return g if keepdims else np.expand_dims(g, axes)


def sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def grad_fn(g):
        return (np.broadcast_to(_expand(g, axes, keepdims), a.shape).copy(),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def grad_fn(g):
        return (np.broadcast_to(_expand(g, axes, keepdims) / count, a.shape).copy(),)

    return _result(a.data.mean(axis=axes, keepdims=keepdims), (a,), grad_fn, "mean")


def std(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divides by the element count)."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    centred = a.data - a.data.mean(axis=axes, keepdims=True)
    sd = np.sqrt((centred * centred).mean(axis=axes, keepdims=True))

    def grad_fn(g):
        g = _expand(g, axes, keepdims)
        safe = np.where(sd > 0, sd, 1.0)
        return (np.where(sd > 0, g * centred / (count * safe), 0.0),)

    out = sd if keepdims else np.squeeze(sd, axis=axes)
    return _result(out, (a,), grad_fn, "std")


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), grad_fn, "softmax")


def logsumexp(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    m = a.data.max(axis=axes, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axes, keepdims=True))
    weights = np.exp(a.data - lse)

    def grad_fn(g):
        return (_expand(g, axes, keepdims) * weights,)

    out = lse if keepdims else np.squeeze(lse, axis=axes)
    return _result(out, (a,), grad_fn, "logsumexp")


# ------------------------------------------------------------------ structure
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with numpy batching semantics for leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    with np.errstate(over="ignore", invalid="ignore"):  # checked by _result
        out = a.data @ b.data
    return _result(out, (a, b), grad_fn, "matmul")


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, grad_fn, "concat")


def take(a: ArrayLike, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.data[index]), (a,), grad_fn, "take")


# -------------------------------------------------------------- convolutions
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an ``n×c×h×w`` input with an ``o×c×kh×kw`` kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {weight.shape[1]}")
    _, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError("conv2d kernel larger than padded input")
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents = (x, weight, bias)

    def grad_fn(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.einsum(
                    "nohw,oc->nchw", g, weight.data[:, :, i, j])
        gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result(np.ascontiguousarray(out), parents, grad_fn, "conv2d")


def global_avg_pool(x: ArrayLike) -> Tensor:
    """Spatial mean per channel: ``n×c×h×w -> n×c×1×1``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects a 4-D input")
    return mean(x, axis=(2, 3), keepdims=True)


def batchnorm2d(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics (population variance) normalize the
    input and ``running_mean``/``running_var`` are updated in place.
    """
    x = as_tensor(x)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"batchnorm2d channel mismatch: input has {c} channels")
    axes = (0, 2, 3)
    if training:
        mu = mean(x, axis=axes, keepdims=True)
        centred = x - mu
        var = mean(centred * centred, axis=axes, keepdims=True)
        xhat = centred / sqrt(var + eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(c)
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = (x - running_mean.reshape(1, c, 1, 1)) * inv
    return xhat * reshape(scale, (1, c, 1, 1)) + reshape(shift, (1, c, 1, 1))
