from __future__ import annotations

from collections.abc import Sequence
from typing import Protocol

import numpy as np

from sbi_ttt.errors import ShapeError
from sbi_ttt.models import autodiff as ad
from sbi_ttt.models.autodiff import Tape, Var
from sbi_ttt.models.store import BlockSpec, FlowParameterStore


class ParamSource(Protocol):
    """Where a forward pass reads its weights from, and which store receives gradients."""

    @property
    def layout(self) -> FlowParameterStore: ...

    @property
    def trainable(self) -> FlowParameterStore: ...

    def var(self, tape: Tape, name: str) -> Var: ...


class StoreParams:
    """Every block of one store is a trainable leaf."""

    def __init__(self, store: FlowParameterStore):
        self.store = store

    @property
    def layout(self) -> FlowParameterStore:
        return self.store

    @property
    def trainable(self) -> FlowParameterStore:
        return self.store

    def var(self, tape: Tape, name: str) -> Var:
        return tape.param(self.store, name)


def weight_name(prefix: str, layer: int) -> str:
    return f"{prefix}.layer{layer}.weight"


def bias_name(prefix: str, layer: int) -> str:
    return f"{prefix}.layer{layer}.bias"


def mlp_block_specs(prefix: str, sizes: Sequence[int]) -> list[BlockSpec]:
    """Weight (out, in) and bias (out,) blocks for an MLP with layer widths `sizes`."""
    if len(sizes) < 2:
        raise ShapeError("an MLP needs at least input and output sizes")
    specs: list[BlockSpec] = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:], strict=True)):
        specs.append(BlockSpec(weight_name(prefix, i), (n_out, n_in)))
        specs.append(BlockSpec(bias_name(prefix, i), (n_out,)))
    return specs


def mlp_depth(store: FlowParameterStore, prefix: str) -> int:
    depth = 0
    names = set(store.names)
    while weight_name(prefix, depth) in names:
        depth += 1
    if depth == 0:
        raise ShapeError(f"no MLP blocks under prefix {prefix!r}")
    return depth


def mlp_forward(
    source: ParamSource | FlowParameterStore, prefix: str, x: Var | np.ndarray
) -> Var:
    """
    tanh hidden layers, linear output layer.

    The returned `Var` carries every intermediate on its tape, ready for `Tape.backward`.
    A plain array input starts a fresh tape.
    """
    if isinstance(source, FlowParameterStore):
        source = StoreParams(source)
    if not isinstance(x, Var):
        x = Tape().constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    depth = mlp_depth(source.layout, prefix)
    expected = source.layout.spec(weight_name(prefix, 0)).shape[1]
    if x.value.ndim != 2 or x.value.shape[1] != expected:
        raise ShapeError(f"{prefix}: expected input width {expected}, got shape {x.value.shape}")

    h = x
    for layer in range(depth):
        h = ad.affine(
            h,
            source.var(x.tape, weight_name(prefix, layer)),
            source.var(x.tape, bias_name(prefix, layer)),
        )
        if layer < depth - 1:
            h = ad.tanh(h)
    return h
