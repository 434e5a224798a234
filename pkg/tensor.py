"""Minimal float64 tensor engine with tape-based reverse-mode differentiation.

Every differentiable operation is a `Function` subclass. `Function.apply` runs
the forward pass on raw numpy arrays and, when gradients are enabled and an
input requires them, records the output tensor on the calling thread's tape.
`backward(loss)` walks the tape in reverse creation order (a valid topological
order, since inputs always exist before outputs) and clears it afterwards.
"""
import threading
from collections import defaultdict
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf
from loguru import logger

from errors import ContractError, ShapeError

ArrayLike = Union[np.ndarray, Sequence, float, int]

_local = threading.local()


def _tape() -> list:
    if not hasattr(_local, "tape"):
        _local.tape = []
    return _local.tape


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording anything on the tape."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def clear_tape() -> None:
    tape = _tape()
    for node in tape:
        node._creator = None
    tape.clear()


def tape_length() -> int:
    return len(_tape())


class FlopCounter:
    """Counts matmul FLOPs (2 per multiply-accumulate) by stage while active.

    Usage:
        with FlopCounter() as counter, flop_stage("routing"):
            ...
        counter.by_stage["routing"]
    """

    def __init__(self):
        self.by_stage: Dict[str, int] = defaultdict(int)

    def add(self, stage: str, flops: int) -> None:
        self.by_stage[stage] += int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_stage.values())

    def __enter__(self) -> "FlopCounter":
        if not hasattr(_local, "counters"):
            _local.counters = []
        _local.counters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.counters.remove(self)


@contextmanager
def flop_stage(name: str) -> Iterator[None]:
    previous = getattr(_local, "stage", "other")
    _local.stage = name
    try:
        yield
    finally:
        _local.stage = previous


def _charge_flops(flops: int) -> None:
    counters = getattr(_local, "counters", None)
    if counters:
        counters[-1].add(getattr(_local, "stage", "other"), flops)


def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    if grad.shape == to_shape:
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(to_shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations.

    `forward` receives the input arrays and returns the output array.
    `backward` receives dL/d(output) and returns one gradient (or None) per input.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *args: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward")

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, requires_grad)
        if requires_grad:
            result._creator = fn
            _tape().append(result)
        return result


class Tensor:
    """Dense float64 array with optional participation in the gradient tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._creator: Optional[Function] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(array, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t._creator = None
        return t

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls._wrap(np.zeros(shape), requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError("gradient shape does not match tensor", grad.shape, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return Add.apply(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        return Sub.apply(self, _as_tensor(other))

    def __rsub__(self, other: Union["Tensor", float]) -> "Tensor":
        return Sub.apply(_as_tensor(other), self)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        return Mul.apply(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Union["Tensor", float]) -> "Tensor":
        return Div.apply(self, _as_tensor(other))

    def __neg__(self) -> "Tensor":
        return Mul.apply(self, Tensor._wrap(np.array(-1.0)))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return GetItem.apply(self, key=key)

    # movement
    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes: int) -> "Tensor":
        return Permute.apply(self, axes=axes)

    def transpose(self, axis0: int = -2, axis1: int = -1) -> "Tensor":
        axes = list(range(self.ndim))
        axes[axis0], axes[axis1] = axes[axis1], axes[axis0]
        return Permute.apply(self, axes=tuple(axes))

    def take(self, indices: np.ndarray, axis: int = 0) -> "Tensor":
        return Take.apply(self, indices=np.asarray(indices, dtype=np.int64), axis=axis)

    def roll(self, shifts: Tuple[int, ...], axes: Tuple[int, ...]) -> "Tensor":
        return Roll.apply(self, shifts=tuple(shifts), axes=tuple(axes))

    # reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def abs(self) -> "Tensor":
        return Abs.apply(self)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor._wrap(np.asarray(value, dtype=np.float64))


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        return (
            unbroadcast(grad / b.data, a.shape),
            unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, grad):
        return (grad * np.sign(self.inputs[0].data),)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, tuple(a % len(shape) for a in np.atleast_1d(self.axis)))
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Permute(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Take(Function):
    """Index along one axis. 1-D indices work on any axis; N-D indices on axis 0."""

    def forward(self, a, indices, axis=0):
        self.indices, self.axis = indices, axis
        if indices.ndim != 1 and axis != 0:
            raise ShapeError("multi-dimensional indices are only supported on axis 0", indices.shape, a.shape)
        if indices.size and (indices.min() < -a.shape[axis] or indices.max() >= a.shape[axis]):
            raise IndexError(f"index out of range for axis {axis} of size {a.shape[axis]}")
        return np.take(a, indices, axis=axis)

    def backward(self, grad):
        shape = self.inputs[0].shape
        acc = np.zeros(shape)
        if self.axis == 0:
            np.add.at(acc, self.indices, grad)
        else:
            moved = np.moveaxis(acc, self.axis, 0)
            np.add.at(moved, self.indices, np.moveaxis(grad, self.axis, 0))
        return (acc,)


class GetItem(Function):
    """Basic (slice/int) indexing only; fancy indexing goes through `take`."""

    def forward(self, a, key):
        self.key = key
        return a[key]

    def backward(self, grad):
        acc = np.zeros(self.inputs[0].shape)
        acc[self.key] = grad
        return (acc,)


class Roll(Function):
    def forward(self, a, shifts, axes):
        self.shifts, self.axes = shifts, axes
        return np.roll(a, shifts, axis=axes)

    def backward(self, grad):
        return (np.roll(grad, tuple(-s for s in self.shifts), axis=self.axes),)


class MatMul(Function):
    def forward(self, a, b):
        batch = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
        _charge_flops(2 * batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.inputs
        ga = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Row-major matrix product over the last two axes.

    Leading (batch) axes must match exactly, or `b` may be a plain 2-D matrix
    shared across all of `a`'s batch entries.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        logger.error(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
        raise ShapeError("matmul inner dimensions disagree", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        logger.error(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
        raise ShapeError("matmul batch dimensions must match exactly", a.shape, b.shape)
    return MatMul.apply(a, b)


class Softmax(Function):
    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


def softmax_lastdim(t: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    if t.ndim == 0 or t.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis", t.shape)
    return Softmax.apply(t)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        return self.xhat * gamma + beta

    def backward(self, grad):
        x, gamma, _ = self.inputs
        n = x.shape[-1]
        lead = tuple(range(x.ndim - 1))
        dxhat = grad * gamma.data
        dx = (self.inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        dgamma = (grad * self.xhat).sum(axis=lead)
        dbeta = grad.sum(axis=lead)
        return dx, dgamma, dbeta


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (t.shape[-1],) or beta.shape != (t.shape[-1],):
        raise ShapeError("layer_norm affine parameters must match the last axis", t.shape, gamma.shape, beta.shape)
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    return LayerNorm.apply(t, gamma, beta, eps=eps)


class Gelu(Function):
    def forward(self, a):
        self.cdf = 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
        return a * self.cdf

    def backward(self, grad):
        x = self.inputs[0].data
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (grad * (self.cdf + x * pdf),)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    return Gelu.apply(t)


class Conv2d(Function):
    """Direct cross-correlation: one tensordot per kernel tap, zero padding."""

    def forward(self, x, w, b=None, stride=1, pad=0):
        self.stride, self.pad = stride, pad
        c_in, h, width = x.shape
        _, _, kh, kw = w.shape
        self.out_h = (h + 2 * pad - kh) // stride + 1
        self.out_w = (width + 2 * pad - kw) // stride + 1
        self.xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        out = np.zeros((w.shape[0], self.out_h, self.out_w))
        for i in range(kh):
            for j in range(kw):
                out += np.tensordot(w[:, :, i, j], self._tap(i, j), axes=([1], [0]))
        if b is not None:
            out += b[:, None, None]
        return out

    def _tap(self, i: int, j: int) -> np.ndarray:
        s = self.stride
        return self.xp[:, i : i + s * (self.out_h - 1) + 1 : s, j : j + s * (self.out_w - 1) + 1 : s]

    def backward(self, grad):
        x, w = self.inputs[0], self.inputs[1]
        s, p = self.stride, self.pad
        _, _, kh, kw = w.shape
        gxp = np.zeros_like(self.xp)
        gw = np.zeros(w.shape)
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.tensordot(grad, self._tap(i, j), axes=([1, 2], [1, 2]))
                gxp[:, i : i + s * (self.out_h - 1) + 1 : s, j : j + s * (self.out_w - 1) + 1 : s] += np.tensordot(
                    w.data[:, :, i, j], grad, axes=([0], [0])
                )
        gx = gxp[:, p : p + x.shape[1], p : p + x.shape[2]]
        if len(self.inputs) == 3:
            return gx, gw, grad.sum(axis=(1, 2))
        return gx, gw


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a [C_in, H, W] map with [C_out, C_in, kh, kw] filters."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ShapeError("conv2d expects x [C_in,H,W] and w [C_out,C_in,kh,kw]", x.shape, w.shape)
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeError("conv2d bias must have one entry per output channel", bias.shape, w.shape)
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    for size, k in ((x.shape[1], w.shape[2]), (x.shape[2], w.shape[3])):
        span = size + 2 * pad - k
        if span < 0 or span % stride != 0:
            raise ShapeError(f"conv2d output size is not integral for stride={stride}, pad={pad}", x.shape, w.shape)
    inputs = (x, w) if bias is None else (x, w, bias)
    return Conv2d.apply(*inputs, stride=stride, pad=pad)


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tensor the scalar `loss` depends on, then reset the tape."""
    if loss.ndim != 0:
        logger.error(f"backward needs a scalar loss, got shape {loss.shape}")
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = _tape()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        fn = node._creator
        if node.grad is None or fn is None:
            continue
        for inp, g in zip(fn.inputs, fn.backward(node.grad)):
            if g is not None and inp.requires_grad:
                inp._accumulate(g)
    clear_tape()


def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar `f` at `x`: (f(x+eps e) - f(x-eps e)) / 2eps per element."""
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"finite-difference eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            probe = base.copy()
            probe[idx] += eps
            f_plus = _scalar(f(Tensor._wrap(probe)))
            probe[idx] = base[idx] - eps
            f_minus = _scalar(f(Tensor._wrap(probe)))
            grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor._wrap(grad)


def _scalar(value: Union[Tensor, float]) -> float:
    if isinstance(value, Tensor):
        if value.size != 1:
            raise ContractError(f"finite differences need a scalar function, got shape {value.shape}")
        return value.item()
    return float(value)


def gradient_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8, atol: float = 1e-9) -> float:
    """Largest element-wise relative error |a-b| / max(|a|,|b|,floor).

    Entries whose absolute difference is below `atol` count as exact; central
    differences carry round-off of that order around true zeros.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("gradient shapes differ", a.shape, b.shape)
    if not a.size:
        return 0.0
    diff = np.abs(a - b)
    rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    rel[diff <= atol] = 0.0
    return float(rel.max())
