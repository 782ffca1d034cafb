"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Every operation on a :class:`Var` appends one node to its :class:`Tape`;
:meth:`Tape.backward` walks the nodes in reverse and accumulates gradients.
Layers outside this module register new operations with :meth:`Tape.record`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    __slots__ = ("value", "grad", "tape", "index", "requires_grad", "name")
    __array_priority__ = 100
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape: "Tape", value: np.ndarray, requires_grad: bool, name: str | None = None):
        self.tape = tape
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.index = -1
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(other, dtype=self.value.dtype)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self.tape.record(
            a.value + b.value, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self.tape.record(
            a.value - b.value, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self.tape.record(
            a.value * b.value, (a, b),
            lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.value / b.value
        return self.tape.record(
            out, (a, b),
            lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return self.tape.record(-self.value, (self,), lambda g: (-g,))

    def __pow__(self, k: float):
        a = self
        return self.tape.record(a.value ** k, (a,), lambda g: (g * k * a.value ** (k - 1),))

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        return self.tape.record(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))

    def __getitem__(self, key):
        a = self
        out = a.value[key]

        def back(g):
            full = np.zeros_like(a.value)
            np.add.at(full, key, g)
            return (full,)

        return self.tape.record(out, (a,), back)

    # reductions / shape ---------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self.tape.record(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod([self.value.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        return self.tape.record(a.value.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        a = self
        inv = np.argsort(axes)
        return self.tape.record(a.value.transpose(*axes), (a,), lambda g: (g.transpose(*inv),))


class Tape:
    """Records operations for one forward pass; ``backward`` may run once per seed set."""

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self._nodes: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def __len__(self):
        return len(self._nodes)

    def clear(self) -> None:
        """Drop recorded nodes (and the activations their closures hold)."""
        self._nodes.clear()

    def var(self, value, name: str | None = None) -> Var:
        """A differentiable leaf."""
        return Var(self, np.asarray(value, dtype=self.dtype), True, name)

    def const(self, value, dtype=None) -> Var:
        return Var(self, np.asarray(value, dtype=dtype or self.dtype), False)

    def record(self, value, parents: Sequence[Var], backward: Callable) -> Var:
        out = Var(self, np.asarray(value), any(p.requires_grad for p in parents))
        if out.requires_grad:
            out.index = len(self._nodes)
            self._nodes.append((out, tuple(parents), backward))
        return out

    def backward(self, seeds) -> None:
        """Accumulate gradients from ``seeds``: a Var (scalar, seeded with 1) or ``[(var, grad), ...]``."""
        if isinstance(seeds, Var):
            seeds = [(seeds, np.ones_like(seeds.value))]
        if not self._nodes:
            raise TapeError("backward called before any recorded forward operation")
        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Var] = {}
        for v, g in seeds:
            g = np.asarray(g, dtype=v.value.dtype)
            if g.shape != v.shape:
                raise TapeError(f"seed gradient shape {g.shape} != output shape {v.shape}")
            if not v.requires_grad:
                continue
            key = id(v)
            grads[key] = grads[key] + g if key in grads else g.copy()
            leaves[key] = v
        for out, parents, back in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            pgrads = back(g)
            for p, pg in zip(parents, pgrads):
                if not p.requires_grad or pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    leaves[key] = p
        # remaining entries belong to leaves
        for key, g in grads.items():
            leaves[key].grad = g


# ---------------------------------------------------------------------------
# elementwise functions


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    return a.tape.record(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def sin(a: Var) -> Var:
    return a.tape.record(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a: Var) -> Var:
    return a.tape.record(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def absolute(a: Var) -> Var:
    return a.tape.record(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape.record(out, (a,), lambda g: (g * out * (1.0 - out),))


def maximum(a: Var, b) -> Var:
    b = a._lift(b)
    pick = a.value >= b.value
    return a.tape.record(
        np.where(pick, a.value, b.value), (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def minimum(a: Var, b) -> Var:
    b = a._lift(b)
    pick = a.value <= b.value
    return a.tape.record(
        np.where(pick, a.value, b.value), (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)))


def where(cond, a: Var, b) -> Var:
    b = a._lift(b)
    cond = np.asarray(cond, dtype=bool)
    return a.tape.record(
        np.where(cond, a.value, b.value), (a, b),
        lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)))


def max_reduce(a: Var, axis: int) -> Var:
    """Max along ``axis``; the gradient goes to the first arg-max."""
    idx = np.expand_dims(np.argmax(a.value, axis=axis), axis)
    out = np.take_along_axis(a.value, idx, axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return a.tape.record(out, (a,), back)


def min_reduce(a: Var, axis: int) -> Var:
    return -max_reduce(-a, axis)


def take_along_axis(a: Var, idx: np.ndarray, axis: int) -> Var:
    def back(g):
        full = np.zeros_like(a.value)
        # indices may repeat within a row
        moved_full = np.moveaxis(full, axis, -1)
        moved_idx = np.moveaxis(np.broadcast_to(idx, g.shape), axis, -1)
        moved_g = np.moveaxis(g, axis, -1)
        lead = np.indices(moved_idx.shape[:-1])
        lead = [np.broadcast_to(x[..., None], moved_idx.shape) for x in lead]
        np.add.at(moved_full, (*lead, moved_idx), moved_g)
        return (full,)

    return a.tape.record(np.take_along_axis(a.value, idx, axis=axis), (a,), back)


def stack(vars_: Sequence[Var], axis: int = 0) -> Var:
    tape = vars_[0].tape

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vars_)))

    return tape.record(np.stack([v.value for v in vars_], axis=axis), tuple(vars_), back)


def concatenate(vars_: Sequence[Var], axis: int = 0) -> Var:
    tape = vars_[0].tape
    bounds = np.cumsum([v.shape[axis] for v in vars_])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(np.concatenate([v.value for v in vars_], axis=axis), tuple(vars_), back)


def broadcast_to(a: Var, shape) -> Var:
    return a.tape.record(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))
