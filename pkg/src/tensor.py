"""
Reverse-mode differentiation on numpy arrays.

Every differentiable op is a Function with forward/backward on raw arrays.
A Tensor remembers the Function that created it; backward() walks the graph
in reverse topological order and accumulates .grad (a same-shape ndarray).

Broadcasting is limited to equal-rank operands with size-1 axes (bias add,
channelwise affine, masks) and 0-d scalars.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from config import D_CAP, DTYPE, SURROGATE_LOWER
from src.errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.dtype(DTYPE)
_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (per thread)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOATS:
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if len(a) != len(b):
        raise ShapeError(f'{op}: rank mismatch {a} vs {b}')
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f'{op}: cannot broadcast {a} with {b}')


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad back down to an operand's shape."""
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


class Function:
    """Base class for differentiable ops."""

    def __init__(self, *tensors: 'Tensor'):
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: 'Tensor', **kwargs: Any) -> 'Tensor':
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad,
                      creator=func if requires_grad else None)


class Tensor:
    """n-d real array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 creator: Function | None = None, name: str | None = None):
        self.data: np.ndarray = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name

    @property
    def shape(self) -> tuple:
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

    def detach(self) -> 'Tensor':
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f' {self.name}' if self.name else ''
        return f'Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})'

    def __hash__(self) -> int:
        return id(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every upstream tensor's .grad."""
        if not self.requires_grad:
            return
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f'seed gradient shape {grad.shape} != {self.shape}')

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in visited:
                continue
            if expanded:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        # non-leaf gradients live only for this pass
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.creator is None:
                node._accumulate_grad(g)
                continue
            grads = node.creator.backward(g)
            if not isinstance(grads, tuple):
                grads = (grads,)
            for parent, pg in zip(node.creator.tensors, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    def _accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # arithmetic
    def _lift(self, other) -> 'Tensor':
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> 'Tensor':
        return Add.apply(self, self._lift(other))

    def __radd__(self, other) -> 'Tensor':
        return Add.apply(self._lift(other), self)

    def __sub__(self, other) -> 'Tensor':
        return Add.apply(self, -self._lift(other))

    def __rsub__(self, other) -> 'Tensor':
        return Add.apply(self._lift(other), -self)

    def __mul__(self, other) -> 'Tensor':
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other) -> 'Tensor':
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other) -> 'Tensor':
        if isinstance(other, Tensor):
            return Mul.apply(self, Pow.apply(other, exponent=-1.0))
        return Mul.apply(self, self._lift(1.0 / other))

    def __rtruediv__(self, other) -> 'Tensor':
        return Mul.apply(self._lift(other), Pow.apply(self, exponent=-1.0))

    def __neg__(self) -> 'Tensor':
        return Mul.apply(self, self._lift(-1.0))

    def __pow__(self, exponent: float) -> 'Tensor':
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    # reductions and movement
    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=axes)

    def exp(self) -> 'Tensor':
        return Exp.apply(self)

    def log(self) -> 'Tensor':
        return Log.apply(self)

    def relu(self) -> 'Tensor':
        return Relu.apply(self)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, 'add')
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a.shape, b.shape, 'mul')
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Pow(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return grad * self.exponent * self.x ** (self.exponent - 1.0)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return grad * self.out


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return grad / self.x


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return grad * self.mask


class Matmul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f'matmul needs >=2-d operands, got {a.shape} and {b.shape}')
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f'matmul inner dimensions differ: {a.shape} x {b.shape}')
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f'matmul batch dimensions differ: {a.shape} x {b.shape}')
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ np.swapaxes(self.b, -1, -2), np.swapaxes(self.a, -1, -2) @ grad


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad, self.shape).copy()


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if self.axes else 1
        return np.asarray(x.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad / self.count, self.shape).copy()


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc

    def backward(self, grad):
        return grad.reshape(self.shape)


class Transpose(Function):
    def forward(self, x, axes):
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f'bad permutation {axes} for rank {x.ndim}')
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad):
        return grad.transpose(self.inverse)


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return y * (grad - (grad * y).sum(axis=self.axis, keepdims=True))


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        return grad - self.softmax * grad.sum(axis=self.axis, keepdims=True)


@dataclass(frozen=True)
class SurrogateSpec:
    """Rectangular pass-through window [lower, upper], both ends closed."""
    kind: str = 'rectangular'
    lower: float = SURROGATE_LOWER
    upper: float = float(D_CAP)

    def __post_init__(self):
        if self.kind != 'rectangular':
            raise ParameterError(f'unknown surrogate kind {self.kind!r}')
        if not self.lower < self.upper:
            raise ParameterError(f'surrogate window needs lower < upper, got [{self.lower}, {self.upper}]')

    def window(self, x: np.ndarray) -> np.ndarray:
        return ((x >= self.lower) & (x <= self.upper)).astype(x.dtype)


class Surrogate(Function):
    def forward(self, x, fn, spec: SurrogateSpec):
        self.mask = spec.window(x)
        return np.asarray(fn(x), dtype=x.dtype)

    def backward(self, grad):
        return grad * self.mask


def custom_grad(forward: Callable[[np.ndarray], np.ndarray],
                surrogate: SurrogateSpec) -> Callable[[Tensor], Tensor]:
    """Wrap an elementwise map so backward passes grad only inside the surrogate window."""
    def node(x: Tensor) -> Tensor:
        return Surrogate.apply(x, fn=forward, spec=surrogate)
    return node


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return Matmul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over a batch of (N, K) logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f'cross_entropy expects (N, K) logits and (N,) labels, got {logits.shape}, {labels.shape}')
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = log_softmax(logits, axis=-1) * Tensor(onehot)
    return -(picked.sum() / float(labels.size))


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; gamma/beta broadcast with leading 1s."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gamma + beta


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)

