"""A small reverse-mode automatic differentiation engine over numpy arrays.

Only the operations the flow model and its losses need are implemented. Values
are float64 throughout. Gradients are accumulated in reverse topological order,
which is fixed by graph construction order, so results are deterministic.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import InputError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return _make(self.data.T, (self,), "transpose", lambda g: (g.T,))

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _make(self.data + other.data, (self, other), "add",
                     lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _make(self.data - other.data, (self, other), "sub",
                     lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return _make(x * y, (self, other), "mul",
                     lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise InputError(f"matmul shape mismatch {x.shape} @ {y.shape}")
        return _make(x @ y, (self, other), "matmul", lambda g: (g @ y.T, x.T @ g))

    def sum(self, axis=None):
        x = self.data
        if axis is None:
            return _make(x.sum(), (self,), "sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))
        out = x.sum(axis=axis)
        return _make(out, (self,), "sum",
                     lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def square(self):
        x = self.data
        return _make(x * x, (self,), "square", lambda g: (2.0 * x * g,))

    def silu(self):
        x = self.data
        s = 1.0 / (1.0 + np.exp(-x))
        return _make(x * s, (self,), "silu", lambda g: (g * s * (1.0 + x * (1.0 - s)),))

    def sigmoid(self):
        s = _sigmoid(self.data)
        return _make(s, (self,), "sigmoid", lambda g: (g * s * (1.0 - s),))

    def log_sigmoid(self):
        x = self.data
        out = -np.logaddexp(0.0, -x)
        return _make(out, (self,), "log_sigmoid", lambda g: (g * _sigmoid(-x),))

    def exp(self):
        with np.errstate(over="ignore"):
            e = np.exp(self.data)
        return _make(e, (self,), "exp", lambda g: (g * e,))

    # differentiation ------------------------------------------------------
    def backward(self):
        """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from here."""
        if self.data.size != 1:
            raise InputError("backward() needs a scalar loss")
        order = _topo(self)
        if not np.isfinite(self.data).all():
            bad = next((n for n in order if not np.isfinite(n.data).all()), self)
            raise NumericError(f"non-finite value at node '{bad.op}' {bad.shape}")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _make(data, parents, op, backward) -> Tensor:
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tuple(tensors), "concat", lambda g: tuple(np.split(g, sizes, axis=axis)))
