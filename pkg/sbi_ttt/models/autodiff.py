"""
Tape-based reverse-mode differentiation over a closed set of array operations.

Every operation appends its output `Var` to the tape that owns its inputs; `Tape.backward`
walks the tape in reverse, so no topological sort is needed. The operation set is exactly
what MLP conditioners, affine couplings and the SNPE losses use.
"""

from __future__ import annotations

from collections.abc import Callable
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import logsumexp as _logsumexp

from sbi_ttt.errors import BackwardError, ShapeError

if TYPE_CHECKING:
    from sbi_ttt.models.store import FlowParameterStore

BackwardFn = Callable[[np.ndarray], None]


class Var:
    """A node on the tape: value, accumulated gradient, and how to push it to parents."""

    __slots__ = ("value", "grad", "tape", "_backward")

    def __init__(self, value: np.ndarray, tape: Tape, backward: BackwardFn | None = None):
        self.value = value
        self.grad: np.ndarray | None = None
        self.tape = tape
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.value.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other: Var | float | np.ndarray) -> Var:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Var | float | np.ndarray) -> Var:
        return add(self, neg(self.tape.lift(other)))

    def __rsub__(self, other: Var | float | np.ndarray) -> Var:
        return add(neg(self), other)

    def __mul__(self, other: Var | float | np.ndarray) -> Var:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Var:
        return neg(self)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Records one forward computation; single-threaded, discarded after backward."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []
        self._leaves: dict[tuple[int, str], Var] = {}
        self._stores: dict[int, FlowParameterStore] = {}

    def record(self, value: np.ndarray, backward: BackwardFn | None = None) -> Var:
        var = Var(np.asarray(value, dtype=np.float64), self, backward)
        self.nodes.append(var)
        return var

    def constant(self, value: np.ndarray | float) -> Var:
        return self.record(np.asarray(value, dtype=np.float64))

    def lift(self, value: Var | float | np.ndarray) -> Var:
        if isinstance(value, Var):
            if value.tape is not self:
                raise BackwardError("operands belong to different tapes")
            return value
        return self.constant(value)

    def param(self, store: FlowParameterStore, name: str) -> Var:
        """Leaf bound to a store block; one leaf per (store, block) on this tape."""
        key = (id(store), name)
        leaf = self._leaves.get(key)
        if leaf is None:
            leaf = self.record(store.block(name))
            self._leaves[key] = leaf
            self._stores[id(store)] = store
        return leaf

    def backward(self, loss: Var, store: FlowParameterStore) -> np.ndarray:
        """
        Gradient of a scalar loss with respect to the flat view of `store`.

        Blocks never touched by the forward pass get zeros. Hooks registered on the store
        run on the assembled flat gradient before it is returned.
        """
        if loss.tape is not self or not self.nodes:
            raise BackwardError("backward called without a recorded forward pass")
        if loss.value.size != 1:
            raise BackwardError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

        flat = np.zeros(store.size)
        for spec, offset in zip(store.specs, store.offsets, strict=True):
            leaf = self._leaves.get((id(store), spec.name))
            if leaf is not None and leaf.grad is not None:
                flat[offset : offset + spec.size] = leaf.grad.ravel()
        return store.apply_hooks(flat)


# --- operations -------------------------------------------------------------------------


def _tape_of(*items: Var | float | np.ndarray) -> Tape:
    for item in items:
        if isinstance(item, Var):
            return item.tape
    raise BackwardError("at least one operand must be a Var")


def add(a: Var | float | np.ndarray, b: Var | float | np.ndarray) -> Var:
    tape = _tape_of(a, b)
    x, y = tape.lift(a), tape.lift(b)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g)
        y._accumulate(g)

    return tape.record(x.value + y.value, backward)


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, lambda g: a._accumulate(-g))


def mul(a: Var | float | np.ndarray, b: Var | float | np.ndarray) -> Var:
    tape = _tape_of(a, b)
    x, y = tape.lift(a), tape.lift(b)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * y.value)
        y._accumulate(g * x.value)

    return tape.record(x.value * y.value, backward)


def matmul(a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shapes {a.value.shape} and {b.value.shape} do not align")

    def backward(g: np.ndarray) -> None:
        a._accumulate(g @ b.value.T)
        b._accumulate(a.value.T @ g)

    return a.tape.record(a.value @ b.value, backward)


def affine(x: Var, weight: Var, bias: Var) -> Var:
    """x @ W.T + b with W of shape (out, in)."""
    if x.value.shape[-1] != weight.value.shape[1]:
        raise ShapeError(
            f"input width {x.value.shape[-1]} does not match weight {weight.value.shape}"
        )

    def backward(g: np.ndarray) -> None:
        x._accumulate(g @ weight.value)
        weight._accumulate(g.T @ x.value)
        bias._accumulate(g.sum(axis=0))

    return x.tape.record(x.value @ weight.value.T + bias.value, backward)


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, lambda g: a._accumulate(g * (1.0 - out * out)))


def softplus(a: Var) -> Var:
    out = np.logaddexp(0.0, a.value)
    sig = np.exp(a.value - out)
    return a.tape.record(out, lambda g: a._accumulate(g * sig))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, lambda g: a._accumulate(g * out))


def square(a: Var) -> Var:
    return a.tape.record(a.value * a.value, lambda g: a._accumulate(2.0 * g * a.value))


def sum_(a: Var, axis: int | None = None) -> Var:
    def backward(g: np.ndarray) -> None:
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.value.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    return a.tape.record(a.value.sum(axis=axis), backward)


def logsumexp(a: Var, axis: int) -> Var:
    out = _logsumexp(a.value, axis=axis)

    def backward(g: np.ndarray) -> None:
        weights = np.exp(a.value - np.expand_dims(out, axis))
        a._accumulate(np.expand_dims(g, axis) * weights)

    return a.tape.record(out, backward)


def concat_cols(a: Var, b: Var) -> Var:
    split = a.value.shape[1]

    def backward(g: np.ndarray) -> None:
        a._accumulate(g[:, :split])
        b._accumulate(g[:, split:])

    return a.tape.record(np.concatenate([a.value, b.value], axis=1), backward)


def take_cols(a: Var, start: int, stop: int) -> Var:
    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        a._accumulate(full)

    return a.tape.record(a.value[:, start:stop], backward)


def take_rows(a: Var, index: np.ndarray) -> Var:
    index = np.asarray(index, dtype=np.intp)

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return a.tape.record(a.value[index], backward)


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    return a.tape.record(a.value.reshape(shape), lambda g: a._accumulate(g.reshape(a.value.shape)))


def gaussian_logpdf(u: Var) -> Var:
    """Row-wise standard normal log-density of an (n, d) array."""
    d = u.value.shape[1]
    return add(mul(sum_(square(u), axis=1), -0.5), -0.5 * d * np.log(2.0 * np.pi))
