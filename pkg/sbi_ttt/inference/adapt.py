"""
Test-time adaptation of a pretrained flow to a shifted simulator.

All four strategies run the SNPE round loop against the new simulator and observation:

- full: every weight trainable, warm-started at the pretrained weights;
- lora: base frozen, low-rank adapters trained, proposals use the merged weights;
- gradsubspace-ttt: full weights, but each round a hook projects every gradient onto the
  span of gradient snapshots taken at the pretrained weights;
- gradsubspace-pea: weights restricted to phi0 + U c and only c is optimised, restarting
  from c = 0 every round.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sbi_ttt.errors import ArtifactError
from sbi_ttt.inference.snpe import (
    Dataset,
    FullParameters,
    LossContext,
    RoundSchedule,
    SNPEResult,
    Trainable,
    run_rounds,
)
from sbi_ttt.inference.subspace import (
    GradSubspace,
    SubspaceSpec,
    compute_subspace,
    project_gradient,
    snapshot_batches,
    snapshot_gradients,
)
from sbi_ttt.models.autodiff import Tape, Var
from sbi_ttt.models.flow import ConditionalFlow
from sbi_ttt.models.lora import LoRAAdapter, LoraParams
from sbi_ttt.models.store import HookHandle
from sbi_ttt.simulation.priors import BoxUniformPrior
from sbi_ttt.simulation.types import Simulator, TimeSeries


class LoraParameters:
    def __init__(self, base: ConditionalFlow, adapter: LoRAAdapter):
        self.base = base
        self.adapter = adapter
        self._flow = base.with_source(LoraParams(base.store, adapter))

    @property
    def flow(self) -> ConditionalFlow:
        return self._flow

    @property
    def values(self) -> np.ndarray:
        return self.adapter.store.flat

    def gradient(self, tape: Tape, loss: Var) -> np.ndarray:
        return tape.backward(loss, self.adapter.store)

    def after_update(self) -> None:
        pass

    def proposal_flow(self) -> ConditionalFlow:
        return self.base.with_store(self.adapter.merged(self.base.store))


class SubspaceCoefficients:
    """phi = phi0 + U c; the optimiser state lives in R^r."""

    def __init__(self, base: ConditionalFlow, subspace: GradSubspace):
        self.base = base
        self.subspace = subspace
        self.c = np.zeros(subspace.rank)
        self._flow = base.copy()

    @property
    def flow(self) -> ConditionalFlow:
        return self._flow

    @property
    def values(self) -> np.ndarray:
        return self.c

    def gradient(self, tape: Tape, loss: Var) -> np.ndarray:
        return self.subspace.coefficients(tape.backward(loss, self._flow.store))

    def after_update(self) -> None:
        self._flow.store.unflatten(self.base.store.flat + self.subspace.basis @ self.c)

    def proposal_flow(self) -> ConditionalFlow:
        return self._flow


@dataclass
class SubspaceRecord:
    round_index: int
    subspace: GradSubspace
    snapshots: np.ndarray
    batches: list[np.ndarray]
    context: LossContext
    seed: int

    @property
    def snapshot_batch_size(self) -> int:
        """Pairs per snapshot batch, which can fall below the requested size in small rounds."""
        return int(self.batches[0].shape[0])


@dataclass
class GradSubspaceStrategy:
    """Round hook shared by both subspace methods; `mode` picks the update rule."""

    flow0: ConditionalFlow
    spec: SubspaceSpec
    mode: str  # "ttt" or "pea"
    records: list[SubspaceRecord] = field(default_factory=list)
    _handle: HookHandle | None = None

    def identify(
        self, round_index: int, dataset: Dataset, fresh: np.ndarray, context: LossContext, seed: int
    ) -> GradSubspace:
        batches = snapshot_batches(fresh, self.spec.n_batches, self.spec.batch_size, seed)
        G = snapshot_gradients(self.flow0, dataset, batches, context, seed)
        subspace = compute_subspace(G, self.spec, snapshot_batch_size=len(batches[0]))
        self.records.append(SubspaceRecord(round_index, subspace, G, batches, context, seed))
        return subspace

    def prepare(
        self,
        round_index: int,
        trainable: Trainable,
        dataset: Dataset,
        fresh: np.ndarray,
        context: LossContext,
        seed: int,
    ) -> Trainable:
        subspace = self.identify(round_index, dataset, fresh, context, seed)
        if self.mode == "pea":
            return SubspaceCoefficients(self.flow0, subspace)
        assert isinstance(trainable, FullParameters)
        self._handle = trainable.flow.store.register_hook(
            lambda g: project_gradient(subspace, g)
        )
        return trainable

    def finish(self, round_index: int, trainable: Trainable) -> Trainable:
        if self._handle is not None:
            self._handle.remove()
            self._handle = None
        return trainable


@dataclass
class AdaptResult:
    method: str
    snpe: SNPEResult
    trainable_dim: int
    total_dim: int
    adapter: LoRAAdapter | None = None
    subspaces: list[SubspaceRecord] = field(default_factory=list)

    @property
    def flow(self) -> ConditionalFlow:
        return self.snpe.flow


def check_checkpoint(flow0: ConditionalFlow, y: TimeSeries, prior: BoxUniformPrior) -> None:
    if flow0.standardizer is None:
        raise ArtifactError("pretrained flow has no fitted observation standardiser")
    if flow0.config.theta_dim != prior.dim:
        raise ArtifactError(
            f"checkpoint theta_dim {flow0.config.theta_dim} != prior dimension {prior.dim}"
        )
    if flow0.config.feature_dim != y.features().shape[0]:
        raise ArtifactError("checkpoint feature_dim does not match the observation")


def finetune_full(
    flow0: ConditionalFlow,
    simulator: Simulator,
    y: TimeSeries,
    prior: BoxUniformPrior,
    schedule: RoundSchedule,
    seed: int,
    workers: int = 1,
) -> AdaptResult:
    check_checkpoint(flow0, y, prior)
    trainable = FullParameters(flow0.copy())
    result = run_rounds(trainable, prior, simulator, y, schedule, seed, workers=workers)
    d = flow0.store.size
    return AdaptResult("ttt", result, trainable_dim=d, total_dim=d)


def finetune_lora(
    flow0: ConditionalFlow,
    adapter: LoRAAdapter,
    simulator: Simulator,
    y: TimeSeries,
    prior: BoxUniformPrior,
    schedule: RoundSchedule,
    seed: int,
    workers: int = 1,
) -> AdaptResult:
    """Trains `adapter` in place; the base weights of `flow0` are never written."""
    check_checkpoint(flow0, y, prior)
    trainable = LoraParameters(flow0, adapter)
    result = run_rounds(trainable, prior, simulator, y, schedule, seed, workers=workers)
    return AdaptResult(
        "lora",
        result,
        trainable_dim=adapter.trainable_count,
        total_dim=flow0.store.size,
        adapter=adapter,
    )


def _finetune_gradsubspace(
    mode: str,
    flow0: ConditionalFlow,
    simulator: Simulator,
    y: TimeSeries,
    prior: BoxUniformPrior,
    schedule: RoundSchedule,
    spec: SubspaceSpec,
    seed: int,
    workers: int,
) -> AdaptResult:
    check_checkpoint(flow0, y, prior)
    frozen = flow0.copy()
    strategy = GradSubspaceStrategy(frozen, spec, mode)
    result = run_rounds(
        FullParameters(flow0.copy()),
        prior,
        simulator,
        y,
        schedule,
        seed,
        strategy=strategy,
        workers=workers,
    )
    d = flow0.store.size
    ranks = [r.subspace.rank for r in strategy.records]
    trainable_dim = max(ranks) if mode == "pea" else d
    return AdaptResult(
        f"gs-{mode}", result, trainable_dim=trainable_dim, total_dim=d, subspaces=strategy.records
    )


def finetune_gradsubspace_ttt(
    flow0: ConditionalFlow,
    simulator: Simulator,
    y: TimeSeries,
    prior: BoxUniformPrior,
    schedule: RoundSchedule,
    spec: SubspaceSpec,
    seed: int,
    workers: int = 1,
) -> AdaptResult:
    return _finetune_gradsubspace("ttt", flow0, simulator, y, prior, schedule, spec, seed, workers)


def finetune_gradsubspace_pea(
    flow0: ConditionalFlow,
    simulator: Simulator,
    y: TimeSeries,
    prior: BoxUniformPrior,
    schedule: RoundSchedule,
    spec: SubspaceSpec,
    seed: int,
    workers: int = 1,
) -> AdaptResult:
    return _finetune_gradsubspace("pea", flow0, simulator, y, prior, schedule, spec, seed, workers)
