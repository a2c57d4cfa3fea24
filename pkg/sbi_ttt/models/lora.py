from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from sbi_ttt.errors import AdapterError, ArtifactError, ConfigError
from sbi_ttt.events import log_event
from sbi_ttt.models import autodiff as ad
from sbi_ttt.models.autodiff import Tape, Var
from sbi_ttt.models.schema import load_document, write_document
from sbi_ttt.models.store import (
    BlockSpec,
    FlowParameterStore,
    StoreDocument,
    store_from_document,
    store_to_document,
)

LORA_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LoRASpec:
    rank: int = 8
    alpha: float = 8.0
    init_sigma: float = 0.01
    targets: tuple[str, ...] | None = None  # None = every weight matrix wide enough for rank

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError("LoRA rank must be at least 1")
        if self.alpha <= 0 or self.init_sigma < 0:
            raise ConfigError("LoRA alpha must be positive and init_sigma non-negative")


def _a_name(target: str) -> str:
    return f"{target}.lora_A"


def _b_name(target: str) -> str:
    return f"{target}.lora_B"


class LoRAAdapter:
    """
    Low-rank updates W' = W0 + (alpha / r) B A on a frozen base store.

    A has shape (r, k) and B has shape (d, r) for a (d, k) weight; B starts at exactly zero
    so the adapted network reproduces the base one until the first step.
    """

    def __init__(
        self, targets: Sequence[str], rank: int, alpha: float, store: FlowParameterStore
    ):
        self.targets = tuple(targets)
        self.rank = rank
        self.alpha = alpha
        self.store = store

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_count(self) -> int:
        return self.store.size

    def delta(self, target: str) -> np.ndarray:
        """Scaled effective update (alpha / r) B A for one target."""
        b = self.store.block(_b_name(target))
        a = self.store.block(_a_name(target))
        return self.scaling * (b @ a)

    def merged(self, base: FlowParameterStore) -> FlowParameterStore:
        """Plain store with every update folded into its base weight."""
        out = base.copy()
        for target in self.targets:
            out.block(target)[...] = base.block(target) + self.delta(target)
        return out

    def check_base(self, base: FlowParameterStore) -> None:
        for target in self.targets:
            d, k = base.spec(target).shape
            if self.store.spec(_b_name(target)).shape != (d, self.rank) or self.store.spec(
                _a_name(target)
            ).shape != (self.rank, k):
                raise AdapterError(f"adapter shapes for {target} do not match the base weight")


def default_lora_targets(base: FlowParameterStore, rank: int) -> list[str]:
    """
    Every weight matrix (biases excluded) whose smaller side is at least `rank`.

    Narrower matrices stay frozen; each one is reported as an `adapt.lora.skip` event.
    """
    targets: list[str] = []
    for s in base.specs:
        if not s.name.endswith(".weight") or len(s.shape) != 2:
            continue
        if min(s.shape) >= rank:
            targets.append(s.name)
        else:
            log_event("adapt.lora.skip", target=s.name, shape=list(s.shape), rank=rank)
    return targets


def lora_attach(base: FlowParameterStore, spec: LoRASpec, seed: int) -> LoRAAdapter:
    targets = list(spec.targets) if spec.targets is not None else default_lora_targets(
        base, spec.rank
    )
    if not targets:
        raise AdapterError("no LoRA targets")
    specs: list[BlockSpec] = []
    for target in targets:
        if target not in base.names:
            raise AdapterError(f"unknown LoRA target {target}")
        shape = base.spec(target).shape
        if len(shape) != 2 or not target.endswith(".weight"):
            raise AdapterError(f"LoRA target {target} is not a weight matrix")
        d, k = shape
        if spec.rank > min(d, k):
            raise AdapterError(f"rank {spec.rank} exceeds min{shape} for target {target}")
        specs.append(BlockSpec(_a_name(target), (spec.rank, k)))
        specs.append(BlockSpec(_b_name(target), (d, spec.rank)))

    store = FlowParameterStore(specs)
    rng = np.random.default_rng(seed)
    for target in targets:
        a = store.block(_a_name(target))
        a[...] = rng.normal(0.0, spec.init_sigma, size=a.shape)
    adapter = LoRAAdapter(targets, spec.rank, spec.alpha, store)
    log_event(
        "adapt.lora.attach",
        targets=list(targets),
        rank=spec.rank,
        alpha=spec.alpha,
        trainable=adapter.trainable_count,
        total=base.size,
    )
    return adapter


class LoraParams:
    """Frozen base weights with adapter updates; only A and B receive gradients."""

    def __init__(self, base: FlowParameterStore, adapter: LoRAAdapter):
        adapter.check_base(base)
        self.base = base
        self.adapter = adapter
        self._targets = set(adapter.targets)

    @property
    def layout(self) -> FlowParameterStore:
        return self.base

    @property
    def trainable(self) -> FlowParameterStore:
        return self.adapter.store

    def var(self, tape: Tape, name: str) -> Var:
        w0 = tape.constant(self.base.block(name))
        if name not in self._targets:
            return w0
        a = tape.param(self.adapter.store, _a_name(name))
        b = tape.param(self.adapter.store, _b_name(name))
        return w0 + ad.matmul(b, a) * self.adapter.scaling


class LoRACheckpoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    rank: int
    alpha: float
    targets: list[str]
    parameters: StoreDocument


def save_adapter(adapter: LoRAAdapter, path: str | Path) -> Path:
    doc = LoRACheckpoint(
        schema_version=LORA_SCHEMA_VERSION,
        rank=adapter.rank,
        alpha=adapter.alpha,
        targets=list(adapter.targets),
        parameters=store_to_document(adapter.store),
    )
    return write_document(path, doc)


def load_adapter(path: str | Path, base: FlowParameterStore) -> LoRAAdapter:
    doc = load_document(path, LoRACheckpoint)
    if doc.schema_version != LORA_SCHEMA_VERSION:
        raise ArtifactError(f"{path}: adapter schema {doc.schema_version} unsupported")
    adapter = LoRAAdapter(doc.targets, doc.rank, doc.alpha, store_from_document(doc.parameters))
    adapter.check_base(base)
    return adapter
