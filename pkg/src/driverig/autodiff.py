"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 array and remembers how it was produced; calling
``backward`` on a scalar result walks the tape in reverse topological
order and accumulates gradients into every tensor created with
``requires_grad=True``. Only the handful of operations the trajectory
model needs are implemented.
"""

from __future__ import annotations

import math

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar used sparingly in the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() starts from a scalar")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, s in enumerate(shape):
        if s == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def constant(data) -> Tensor:
    return Tensor(data)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=back)


def scale(a: Tensor, k: float) -> Tensor:
    def back(g):
        _accumulate(a, g * k)

    return Tensor(a.data * k, parents=(a,), backward=back)


def shift(a: Tensor, k) -> Tensor:
    """Add a constant array or scalar."""
    def back(g):
        _accumulate(a, g)

    return Tensor(a.data + k, parents=(a,), backward=back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor(out_data, parents=(a, b), backward=back)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def back(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return Tensor(out_data, parents=(a,), backward=back)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return Tensor(out_data, parents=(a,), backward=back)


def softplus(a: Tensor) -> Tensor:
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        _accumulate(a, g * sig)

    return Tensor(out_data, parents=(a,), backward=back)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def back(g):
        _accumulate(a, g / a.data)

    return Tensor(out_data, parents=(a,), backward=back)


def square(a: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, g * 2.0 * a.data)

    return Tensor(a.data * a.data, parents=(a,), backward=back)


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def back(g):
        _accumulate(a, -g * out_data * out_data)

    return Tensor(out_data, parents=(a,), backward=back)


def total(a: Tensor) -> Tensor:
    """Sum of all elements."""
    def back(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return Tensor(a.data.sum(), parents=(a,), backward=back)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out_data = a.data.sum(axis=axis)

    def back(g):
        _accumulate(a, np.expand_dims(g, axis) * np.ones_like(a.data))

    return Tensor(out_data, parents=(a,), backward=back)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return Tensor(a.data.mean(), parents=(a,), backward=back)


def concat(parts, axis: int) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return Tensor(out_data, parents=tuple(parts), backward=back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return Tensor(a.data[idx], parents=(a,), backward=back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=back)


LN_2PI = math.log(2.0 * math.pi)


def gaussian_log_density(x, mu: Tensor, sigma: Tensor) -> Tensor:
    """Elementwise log N(x; mu, sigma^2) for constant x."""
    x = np.asarray(x, dtype=np.float64)
    diff = shift(scale(mu, -1.0), x)             # x - mu
    quad = mul(square(diff), reciprocal(scale(square(sigma), 2.0)))
    return shift(scale(add(log(sigma), quad), -1.0), -0.5 * LN_2PI)
