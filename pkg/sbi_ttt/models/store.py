from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict

from sbi_ttt.errors import ArtifactError, ShapeError
from sbi_ttt.models.schema import load_document, write_document

CHECKPOINT_FORMAT_VERSION = 1


class GradientHook(Protocol):
    """Deterministic, length-preserving map applied to the flat gradient."""

    def __call__(self, grad: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class BlockSpec:
    name: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class HookHandle:
    def __init__(self, store: FlowParameterStore, hook: GradientHook):
        self._store = store
        self._hook = hook

    def remove(self) -> None:
        if self._hook in self._store._hooks:
            self._store._hooks.remove(self._hook)


class FlowParameterStore:
    """
    Named weight blocks backed by one contiguous float64 vector.

    `block(name)` returns a reshaped view into the flat vector, so writes through either
    view are seen by the other immediately. Block names, order and shapes are fixed at
    construction.
    """

    def __init__(self, specs: Sequence[BlockSpec], values: np.ndarray | None = None):
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ShapeError("block names must be unique")
        self._specs: tuple[BlockSpec, ...] = tuple(specs)
        offsets = np.cumsum([0] + [s.size for s in self._specs])
        self._offsets: tuple[int, ...] = tuple(int(o) for o in offsets[:-1])
        self._index = {s.name: i for i, s in enumerate(self._specs)}
        size = int(offsets[-1])
        self._flat = np.zeros(size)
        if values is not None:
            self.unflatten(values)
        self._hooks: list[GradientHook] = []

    @property
    def specs(self) -> tuple[BlockSpec, ...]:
        return self._specs

    @property
    def offsets(self) -> tuple[int, ...]:
        return self._offsets

    @property
    def names(self) -> list[str]:
        return [s.name for s in self._specs]

    @property
    def size(self) -> int:
        return int(self._flat.shape[0])

    @property
    def flat(self) -> np.ndarray:
        """The live flat vector (not a copy)."""
        return self._flat

    def spec(self, name: str) -> BlockSpec:
        try:
            return self._specs[self._index[name]]
        except KeyError as exc:
            raise ShapeError(f"unknown parameter block: {name}") from exc

    def block(self, name: str) -> np.ndarray:
        spec = self.spec(name)
        offset = self._offsets[self._index[name]]
        return self._flat[offset : offset + spec.size].reshape(spec.shape)

    def block_slice(self, name: str) -> slice:
        spec = self.spec(name)
        offset = self._offsets[self._index[name]]
        return slice(offset, offset + spec.size)

    def flatten(self) -> np.ndarray:
        return self._flat.copy()

    def unflatten(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._flat.shape:
            raise ShapeError(f"expected flat vector of length {self.size}, got {values.shape}")
        self._flat[...] = values

    def copy(self) -> FlowParameterStore:
        """Independent replica with the same layout; hooks are not copied."""
        return FlowParameterStore(self._specs, self._flat)

    def same_layout(self, other: FlowParameterStore) -> bool:
        return self._specs == other._specs

    def register_hook(self, hook: GradientHook) -> HookHandle:
        self._hooks.append(hook)
        return HookHandle(self, hook)

    def apply_hooks(self, grad: np.ndarray) -> np.ndarray:
        for hook in self._hooks:
            grad = np.asarray(hook(grad), dtype=np.float64)
            if grad.shape != self._flat.shape:
                raise ShapeError("gradient hook changed the gradient length")
        return grad


def init_store(
    specs: Sequence[BlockSpec],
    seed: int,
    zero_blocks: Callable[[str], bool] = lambda name: False,
) -> FlowParameterStore:
    """Glorot-uniform weights, zero biases; blocks selected by `zero_blocks` start at zero."""
    rng = np.random.default_rng(seed)
    store = FlowParameterStore(specs)
    for spec in specs:
        if zero_blocks(spec.name) or len(spec.shape) != 2:
            continue
        fan_out, fan_in = spec.shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        store.block(spec.name)[...] = rng.uniform(-limit, limit, size=spec.shape)
    return store


# --- checkpoint document ---------------------------------------------------------------


class BlockEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    shape: list[int]


class StoreDocument(BaseModel):
    """Self-describing parameter store: names, shapes, flat values, format version."""

    model_config = ConfigDict(extra="forbid")

    format_version: int
    blocks: list[BlockEntry]
    values: list[float]


def store_to_document(store: FlowParameterStore) -> StoreDocument:
    return StoreDocument(
        format_version=CHECKPOINT_FORMAT_VERSION,
        blocks=[BlockEntry(name=s.name, shape=list(s.shape)) for s in store.specs],
        values=store.flat.tolist(),
    )


def store_from_document(doc: StoreDocument) -> FlowParameterStore:
    if doc.format_version != CHECKPOINT_FORMAT_VERSION:
        raise ArtifactError(
            f"checkpoint format {doc.format_version} != supported {CHECKPOINT_FORMAT_VERSION}"
        )
    specs = [BlockSpec(b.name, tuple(b.shape)) for b in doc.blocks]
    return FlowParameterStore(specs, np.asarray(doc.values, dtype=np.float64))


def save_store(store: FlowParameterStore, path: str | Path) -> Path:
    return write_document(path, store_to_document(store))


def load_store(path: str | Path) -> FlowParameterStore:
    return store_from_document(load_document(path, StoreDocument))
