"""Exact first derivatives of small vector functions.

Forward mode uses scalar dual numbers, one directional pass per seed.
Reverse mode records the expression graph of a single call and sweeps it
backwards, so a transposed-Jacobian product costs a small constant times
one function evaluation regardless of the input dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Argument length does not match the declared dimension."""


@dataclass(frozen=True)
class VectorFunction:
    """A deterministic map from R^n_in to R^n_out.

    ``fn`` receives a sequence of scalar-like values (floats, Dual or Var)
    and must return a sequence of the same kind. It must be side-effect
    free and use only arithmetic supported by the scalar types below
    (+, -, *, /, **, and the sqrt/sin/cos/exp/log helpers).
    """

    n_in: int
    n_out: int
    fn: Callable[[Sequence], Sequence]

    def __call__(self, args: Sequence) -> list:
        if len(args) != self.n_in:
            raise DimensionError(
                f"expected {self.n_in} inputs, got {len(args)}")
        out = list(self.fn(args))
        if len(out) != self.n_out:
            raise DimensionError(
                f"function returned {len(out)} outputs, declared {self.n_out}")
        return out


def evaluate(fn: VectorFunction, point) -> np.ndarray:
    """Plain float evaluation, returned as a 1-D array."""
    vals = fn([float(v) for v in point])
    return np.array([float(v) for v in vals], dtype=float)


# ---------------------------------------------------------------------------
# forward mode


class Dual:
    """Value plus one directional derivative."""

    __slots__ = ("value", "dot")

    def __init__(self, value, dot=0.0):
        self.value = value
        self.dot = dot

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.dot + other.dot)
        return Dual(self.value + other, self.dot)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.dot - other.dot)
        return Dual(self.value - other, self.dot)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.dot)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value * other.value,
                        self.dot * other.value + self.value * other.dot)
        return Dual(self.value * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.value
            val = self.value * inv
            return Dual(val, (self.dot - val * other.dot) * inv)
        inv = 1.0 / other
        return Dual(self.value * inv, self.dot * inv)

    def __rtruediv__(self, other):
        inv = 1.0 / self.value
        val = other * inv
        return Dual(val, -val * self.dot * inv)

    def __neg__(self):
        return Dual(-self.value, -self.dot)

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("dual exponents are not supported")
        val = self.value ** p
        return Dual(val, p * self.value ** (p - 1) * self.dot)

    def __lt__(self, other):
        return self.value < _val(other)

    def __le__(self, other):
        return self.value <= _val(other)

    def __gt__(self, other):
        return self.value > _val(other)

    def __ge__(self, other):
        return self.value >= _val(other)

    def __repr__(self):
        return f"Dual({self.value}, {self.dot})"


# ---------------------------------------------------------------------------
# reverse mode


class Var:
    """Node of the recorded expression graph for one reverse sweep."""

    __slots__ = ("value", "parents", "adjoint")

    def __init__(self, value, parents=()):
        self.value = value
        self.parents = parents  # tuple of (Var, partial)
        self.adjoint = 0.0

    def __add__(self, other):
        if isinstance(other, Var):
            return Var(self.value + other.value, ((self, 1.0), (other, 1.0)))
        return Var(self.value + other, ((self, 1.0),))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return Var(self.value - other.value, ((self, 1.0), (other, -1.0)))
        return Var(self.value - other, ((self, 1.0),))

    def __rsub__(self, other):
        return Var(other - self.value, ((self, -1.0),))

    def __mul__(self, other):
        if isinstance(other, Var):
            return Var(self.value * other.value,
                       ((self, other.value), (other, self.value)))
        return Var(self.value * other, ((self, other),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            inv = 1.0 / other.value
            val = self.value * inv
            return Var(val, ((self, inv), (other, -val * inv)))
        inv = 1.0 / other
        return Var(self.value * inv, ((self, inv),))

    def __rtruediv__(self, other):
        inv = 1.0 / self.value
        val = other * inv
        return Var(val, ((self, -val * inv),))

    def __neg__(self):
        return Var(-self.value, ((self, -1.0),))

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("variable exponents are not supported")
        val = self.value ** p
        return Var(val, ((self, p * self.value ** (p - 1)),))

    def __lt__(self, other):
        return self.value < _val(other)

    def __le__(self, other):
        return self.value <= _val(other)

    def __gt__(self, other):
        return self.value > _val(other)

    def __ge__(self, other):
        return self.value >= _val(other)

    def __repr__(self):
        return f"Var({self.value})"


def _val(x):
    if isinstance(x, (Dual, Var)):
        return x.value
    return x


def sqrt(x):
    if isinstance(x, Dual):
        r = math.sqrt(x.value)
        return Dual(r, 0.5 * x.dot / r)
    if isinstance(x, Var):
        r = math.sqrt(x.value)
        return Var(r, ((x, 0.5 / r),))
    return math.sqrt(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(math.sin(x.value), math.cos(x.value) * x.dot)
    if isinstance(x, Var):
        return Var(math.sin(x.value), ((x, math.cos(x.value)),))
    return math.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(math.cos(x.value), -math.sin(x.value) * x.dot)
    if isinstance(x, Var):
        return Var(math.cos(x.value), ((x, -math.sin(x.value)),))
    return math.cos(x)


def exp(x):
    if isinstance(x, Dual):
        e = math.exp(x.value)
        return Dual(e, e * x.dot)
    if isinstance(x, Var):
        e = math.exp(x.value)
        return Var(e, ((x, e),))
    return math.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(math.log(x.value), x.dot / x.value)
    if isinstance(x, Var):
        return Var(math.log(x.value), ((x, 1.0 / x.value),))
    return math.log(x)


# ---------------------------------------------------------------------------
# driver operations


def directional_derivative(fn: VectorFunction, point, direction) -> np.ndarray:
    """J(point) @ direction via one dual pass."""
    if len(point) != fn.n_in or len(direction) != fn.n_in:
        raise DimensionError("point/direction length mismatch")
    args = [Dual(float(p), float(d)) for p, d in zip(point, direction)]
    out = fn(args)
    return np.array([o.dot if isinstance(o, Dual) else 0.0 for o in out])


def jacobian(fn: VectorFunction, point) -> np.ndarray:
    """Exact Jacobian, one unit-seed dual pass per column."""
    if len(point) != fn.n_in:
        raise DimensionError("point length mismatch")
    pt = [float(p) for p in point]
    jac = np.empty((fn.n_out, fn.n_in))
    for j in range(fn.n_in):
        args = [Dual(p, 1.0 if k == j else 0.0) for k, p in enumerate(pt)]
        out = fn(args)
        for i, o in enumerate(out):
            jac[i, j] = o.dot if isinstance(o, Dual) else 0.0
    return jac


def vjp(fn: VectorFunction, point, seed) -> np.ndarray:
    """J(point)^T @ seed via one recorded evaluation and a reverse sweep."""
    seed = np.asarray(seed, dtype=float)
    if len(point) != fn.n_in:
        raise DimensionError("point length mismatch")
    if seed.shape[0] != fn.n_out:
        raise DimensionError("seed length mismatch")
    inputs = [Var(float(p)) for p in point]
    outputs = fn(inputs)
    for o, s in zip(outputs, seed):
        if isinstance(o, Var):
            o.adjoint += float(s)
    for node in reversed(_topo_order(outputs)):
        a = node.adjoint
        if a != 0.0:
            for parent, partial in node.parents:
                parent.adjoint += a * partial
    return np.array([v.adjoint for v in inputs])


def vjp_multi(fn: VectorFunction, point, seeds) -> np.ndarray:
    """J(point)^T @ seeds for a (n_out, k) seed matrix.

    The expression graph is recorded once and swept once per seed column,
    so k products cost one evaluation plus k cheap sweeps.
    """
    seeds = np.asarray(seeds, dtype=float)
    if seeds.ndim == 1:
        return vjp(fn, point, seeds)
    if len(point) != fn.n_in:
        raise DimensionError("point length mismatch")
    if seeds.shape[0] != fn.n_out:
        raise DimensionError("seed length mismatch")
    inputs = [Var(float(p)) for p in point]
    outputs = fn(inputs)
    order = _topo_order(outputs)
    result = np.empty((fn.n_in, seeds.shape[1]))
    for col in range(seeds.shape[1]):
        for node in order:
            node.adjoint = 0.0
        for v in inputs:
            v.adjoint = 0.0
        for o, s in zip(outputs, seeds[:, col]):
            if isinstance(o, Var):
                o.adjoint += float(s)
        for node in reversed(order):
            a = node.adjoint
            if a != 0.0:
                for parent, partial in node.parents:
                    parent.adjoint += a * partial
        result[:, col] = [v.adjoint for v in inputs]
    return result


def _topo_order(outputs):
    """Parents-before-children ordering of the recorded graph."""
    order = []
    seen = set()
    stack = [(o, False) for o in outputs if isinstance(o, Var)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order
