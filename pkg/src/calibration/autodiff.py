"""
Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 array and records the operation that produced it.
Calling ``backward()`` on a scalar output orders the recorded graph
topologically and applies each node's local chain rule, accumulating ``grad``
on every tensor that requires it. Broadcasting follows numpy; gradients are
summed back to the operand shapes.

Only the operations defined here can be recorded. Anything else (a numpy
ufunc outside plain arithmetic, a non-numeric operand) raises
``UnsupportedOperationError`` when the graph is built.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, log_expit
from scipy.special import logsumexp as _logsumexp

from src.shared.errors import ContractViolationError, UnsupportedOperationError

Array = NDArray[np.float64]
Operand = Union["Tensor", float, int, np.ndarray]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (thread-local)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value: Operand) -> "Tensor":
    """Wrap numbers and arrays as constant tensors."""
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float, np.integer, np.floating, np.ndarray)):
        return Tensor(value)
    raise UnsupportedOperationError(
        f"Cannot record an operand of type {type(value).__name__}"
    )


def _normalize_axis(axis: Optional[Union[int, Tuple[int, ...]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


class Tensor:
    """An array node of the differentiation graph."""

    __array_priority__ = 100.0

    def __init__(
        self,
        data: Any,
        _children: Sequence["Tensor"] = (),
        _op: str = "",
        requires_grad: bool = False,
    ):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] = lambda: None
        self._prev: Tuple[Tensor, ...] = tuple(_children)
        self._op = _op

    # graph construction

    @staticmethod
    def _record(
        data: Array,
        parents: Sequence["Tensor"],
        op: str,
        backward: Callable[[Array], None],
    ) -> "Tensor":
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor(data, parents if track else (), op, requires_grad=track)
        if track:

            def _backward() -> None:
                if out.grad is not None:
                    backward(out.grad)

            out._backward = _backward
        return out

    def _accumulate(self, grad: Array) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self, grad: Optional[Array] = None) -> None:
        """Back-propagate from this node; a scalar output seeds with 1."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolationError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        topo: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            node._backward()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    # numpy interop: plain arithmetic dispatches to tensor ops, the rest is refused

    def __array_ufunc__(self, ufunc: Any, method: str, *inputs: Any, **kwargs: Any) -> Any:
        if method == "__call__" and not kwargs and len(inputs) == 2:
            a, b = (as_tensor(x) for x in inputs)
            if ufunc is np.add:
                return a + b
            if ufunc is np.subtract:
                return a - b
            if ufunc is np.multiply:
                return a * b
            if ufunc is np.true_divide:
                return a / b
            if ufunc is np.matmul:
                return a @ b
        raise UnsupportedOperationError(f"numpy ufunc '{ufunc.__name__}' is not differentiable here")

    # arithmetic

    def __add__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g: Array) -> None:
            a._accumulate(g)
            b._accumulate(g)

        return Tensor._record(a.data + b.data, (a, b), "+", backward)

    def __radd__(self, other: Operand) -> "Tensor":
        return self + other

    def __sub__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g: Array) -> None:
            a._accumulate(g)
            b._accumulate(-g)

        return Tensor._record(a.data - b.data, (a, b), "-", backward)

    def __rsub__(self, other: Operand) -> "Tensor":
        return as_tensor(other) - self

    def __neg__(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            a._accumulate(-g)

        return Tensor._record(-a.data, (a,), "neg", backward)

    def __mul__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g: Array) -> None:
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)

        return Tensor._record(a.data * b.data, (a, b), "*", backward)

    def __rmul__(self, other: Operand) -> "Tensor":
        return self * other

    def __truediv__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g: Array) -> None:
            a._accumulate(g / b.data)
            b._accumulate(-g * a.data / (b.data * b.data))

        return Tensor._record(a.data / b.data, (a, b), "/", backward)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise UnsupportedOperationError("Only constant scalar exponents are supported")
        a = self
        p = float(exponent)

        def backward(g: Array) -> None:
            if p == 1.0:
                a._accumulate(g)
            else:
                a._accumulate(g * p * np.power(a.data, p - 1.0))

        return Tensor._record(np.power(a.data, p), (a,), f"**{p}", backward)

    def __matmul__(self, other: Operand) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise UnsupportedOperationError("matmul needs operands with ndim >= 2")

        def backward(g: Array) -> None:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

        return Tensor._record(a.data @ b.data, (a, b), "@", backward)

    def __rmatmul__(self, other: Operand) -> "Tensor":
        return as_tensor(other) @ self

    # reductions

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        a = self
        axes = _normalize_axis(axis, a.ndim)

        def backward(g: Array) -> None:
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.data.shape))

        return Tensor._record(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", backward)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axis(axis, self.ndim)
        count = int(np.prod([self.data.shape[ax] for ax in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) / float(count)

    def logsumexp(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        a = self
        out_keep = _logsumexp(a.data, axis=axis, keepdims=True)

        def backward(g: Array) -> None:
            if not keepdims:
                g = np.expand_dims(g, axis)
            with np.errstate(invalid="ignore"):
                weights = np.exp(a.data - out_keep)
            a._accumulate(g * np.nan_to_num(weights))

        data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
        return Tensor._record(data, (a,), "logsumexp", backward)

    def norm(self, axis: int = -1) -> "Tensor":
        """Euclidean norm; the subgradient at the origin is 0."""
        a = self
        out = np.sqrt(np.sum(a.data * a.data, axis=axis))

        def backward(g: Array) -> None:
            denom = np.expand_dims(out, axis)
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = np.where(denom > 0.0, a.data / denom, 0.0)
            a._accumulate(np.expand_dims(g, axis) * unit)

        return Tensor._record(out, (a,), "norm", backward)

    # elementwise

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)

        def backward(g: Array) -> None:
            a._accumulate(g * out)

        return Tensor._record(out, (a,), "exp", backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            a._accumulate(g / a.data)

        with np.errstate(divide="ignore"):
            return Tensor._record(np.log(a.data), (a,), "log", backward)

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)

        def backward(g: Array) -> None:
            a._accumulate(g * 0.5 / out)

        return Tensor._record(out, (a,), "sqrt", backward)

    def abs(self) -> "Tensor":
        """Absolute value; the subgradient at 0 is 0."""
        a = self

        def backward(g: Array) -> None:
            a._accumulate(g * np.sign(a.data))

        return Tensor._record(np.abs(a.data), (a,), "abs", backward)

    def relu(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            a._accumulate(g * (a.data > 0.0))

        return Tensor._record(np.maximum(a.data, 0.0), (a,), "relu", backward)

    def softplus(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            a._accumulate(g * expit(a.data))

        return Tensor._record(np.logaddexp(0.0, a.data), (a,), "softplus", backward)

    def sigmoid(self) -> "Tensor":
        a = self
        out = expit(a.data)

        def backward(g: Array) -> None:
            a._accumulate(g * out * (1.0 - out))

        return Tensor._record(out, (a,), "sigmoid", backward)

    def log_sigmoid(self) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            a._accumulate(g * expit(-a.data))

        return Tensor._record(log_expit(a.data), (a,), "log_sigmoid", backward)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return self - self.logsumexp(axis=axis, keepdims=True)

    def softmax(self, axis: int = -1) -> "Tensor":
        return self.log_softmax(axis=axis).exp()

    # shape

    def reshape(self, *shape: Any) -> "Tensor":
        a = self
        target = shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape

        def backward(g: Array) -> None:
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._record(a.data.reshape(target), (a,), "reshape", backward)

    def swapaxes(self, axis1: int, axis2: int) -> "Tensor":
        a = self

        def backward(g: Array) -> None:
            a._accumulate(np.swapaxes(g, axis1, axis2))

        return Tensor._record(np.swapaxes(a.data, axis1, axis2), (a,), "swapaxes", backward)

    def expand_dims(self, axis: int) -> "Tensor":
        shape = list(self.data.shape)
        position = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(position, 1)
        return self.reshape(tuple(shape))

    def __getitem__(self, index: Any) -> "Tensor":
        a = self

        parts = index if isinstance(index, tuple) else (index,)
        advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def backward(g: Array) -> None:
            full = np.zeros_like(a.data)
            if advanced:
                # repeated indices must accumulate
                np.add.at(full, index, g)
            else:
                full[index] = g
            a._accumulate(full)

        return Tensor._record(a.data[index], (a,), "getitem", backward)


def solve_lower_triangular(chol: Operand, rhs: Operand) -> Tensor:
    """
    Solve ``L z = b`` for lower-triangular ``L`` with batch broadcasting.

    ``chol`` has shape (..., D, D) and ``rhs`` shape (..., D). Only the lower
    triangle of ``chol`` is read and receives gradient.
    """
    L, b = as_tensor(chol), as_tensor(rhs)
    D = L.shape[-1]
    batch = np.broadcast_shapes(L.shape[:-2], b.shape[:-1])
    L_full = np.broadcast_to(L.data, batch + (D, D))
    b_full = np.broadcast_to(b.data, batch + (D,))
    z = _forward_substitution(L_full, b_full)

    def backward(g: Array) -> None:
        gb = _back_substitution(L_full, np.broadcast_to(g, batch + (D,)))
        b._accumulate(gb)
        if L.requires_grad:
            gL = -np.tril(gb[..., :, None] * z[..., None, :])
            L._accumulate(gL)

    return Tensor._record(z, (L, b), "solve_lower", backward)


def _forward_substitution(L: Array, b: Array) -> Array:
    z = np.empty(b.shape, dtype=np.float64)
    for i in range(L.shape[-1]):
        acc = b[..., i] - np.einsum("...j,...j->...", L[..., i, :i], z[..., :i])
        z[..., i] = acc / L[..., i, i]
    return z


def _back_substitution(L: Array, g: Array) -> Array:
    """Solve ``L^T x = g``."""
    D = L.shape[-1]
    x = np.empty(g.shape, dtype=np.float64)
    for i in reversed(range(D)):
        acc = g[..., i] - np.einsum("...j,...j->...", L[..., i + 1 :, i], x[..., i + 1 :])
        x[..., i] = acc / L[..., i, i]
    return x


def value_and_grad(
    objective: Callable[[Tensor], Tensor], theta: np.ndarray
) -> Tuple[float, Array]:
    """Evaluate a scalar objective of ``theta`` and its reverse-mode gradient."""
    param = Tensor(np.array(theta, dtype=np.float64), requires_grad=True)
    with _grad_enabled():
        out = objective(param)
    if not isinstance(out, Tensor):
        raise UnsupportedOperationError("Objective must return a Tensor")
    if out.data.size != 1:
        raise ContractViolationError("Objective must be scalar")
    out.backward()
    gradient = param.grad if param.grad is not None else np.zeros_like(param.data)
    return float(out.data), gradient


def grad(objective: Callable[[Tensor], Tensor], theta: np.ndarray) -> Array:
    """Reverse-mode gradient of a scalar objective at ``theta``."""
    return value_and_grad(objective, theta)[1]


@contextlib.contextmanager
def _grad_enabled() -> Iterator[None]:
    previous = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = previous


def central_difference(
    objective: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5
) -> Array:
    """Central finite-difference gradient, the reference for gradient checks."""
    theta = np.array(theta, dtype=np.float64)
    out = np.zeros_like(theta)
    flat = theta.reshape(-1)
    out_flat = out.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = objective(theta)
        flat[i] = original - step
        lower = objective(theta)
        flat[i] = original
        out_flat[i] = (upper - lower) / (2.0 * step)
    return out
