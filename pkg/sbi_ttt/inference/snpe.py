"""
Sequential neural posterior estimation.

One round: draw parameters from the current proposal, simulate, append to the dataset,
fit the flow by mini-batch Adam with validation-patience early stopping, and refresh the
proposal to the flow at the observation. Round 0 draws from the prior and trains on the
plain conditional NLL; later rounds use the atomic loss, which normalises each pair's
density over a small set of parameters resampled from the mini-batch.

The optimisation target is abstracted as a `Trainable` so the full, LoRA and subspace
adaptation strategies reuse the same loop.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal, Protocol

import numpy as np

from sbi_ttt.errors import ConfigError, RoundError, SBIError, ShapeError, TrainingError
from sbi_ttt.events import log_event
from sbi_ttt.models import autodiff as ad
from sbi_ttt.models.autodiff import Tape, Var
from sbi_ttt.models.flow import (
    ConditionalFlow,
    embed_observation,
    flow_log_prob,
    flow_sample_in_box,
)
from sbi_ttt.models.optim import AdamConfig, AdamState, adam_update
from sbi_ttt.simulation.batch import derive_seeds, simulate_batch
from sbi_ttt.simulation.priors import BoxUniformPrior, prior_sample
from sbi_ttt.simulation.types import ModelTag, Simulator, TimeSeries

AtomWeighting = Literal["proposal", "prior"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 100
    max_epochs: int = 500
    patience: int = 20
    val_fraction: float = 0.1
    atoms: int = 10
    # "proposal" scores each atom by q * p_m / p as the round objective is written;
    # "prior" uses q / p, the classic atomic estimator. "proposal" double-counts the
    # proposal for atoms drawn from it, so the two disagree once p_m departs from p.
    atom_weighting: AtomWeighting = "proposal"

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be positive, max_epochs >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.atoms < 1:
            raise ConfigError("atoms must be at least 1")
        if self.atom_weighting not in ("proposal", "prior"):
            raise ConfigError(f"unknown atom weighting {self.atom_weighting!r}")
        AdamConfig(lr=self.lr)

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr)


@dataclass(frozen=True)
class RoundSchedule:
    sims_per_round: tuple[int, ...] = (500, 500, 500, 1000)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if not self.sims_per_round or any(n < 1 for n in self.sims_per_round):
            raise ConfigError("sims_per_round must be non-empty with positive counts")
        object.__setattr__(self, "sims_per_round", tuple(int(n) for n in self.sims_per_round))

    @property
    def n_rounds(self) -> int:
        return len(self.sims_per_round)

    @property
    def atoms(self) -> int:
        return self.train.atoms


# --- dataset -------------------------------------------------------------------------------


@dataclass
class Dataset:
    """Accumulated (theta, x) pairs with the seed and round each came from."""

    model_tag: ModelTag
    thetas: np.ndarray
    series: list[TimeSeries] = field(default_factory=list)
    seeds: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    rounds: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    _features: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def empty(cls, model_tag: ModelTag, theta_dim: int) -> Dataset:
        return cls(model_tag=model_tag, thetas=np.empty((0, theta_dim)))

    def __len__(self) -> int:
        return int(self.thetas.shape[0])

    @property
    def theta_dim(self) -> int:
        return int(self.thetas.shape[1])

    @property
    def n_rounds(self) -> int:
        return 0 if len(self) == 0 else int(self.rounds.max()) + 1

    def extend(
        self, thetas: np.ndarray, series: Sequence[TimeSeries], seeds: np.ndarray, round_index: int
    ) -> np.ndarray:
        """Append one round of pairs and return their row indices."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        if thetas.shape[1] != self.theta_dim or len(series) != thetas.shape[0]:
            raise ShapeError("round pairs do not match the dataset dimensions")
        if round_index != self.n_rounds and not (len(self) and round_index == self.n_rounds - 1):
            raise ShapeError(f"round {round_index} is not contiguous with {self.n_rounds} rounds")
        shapes = {s.data.shape for s in series} | {s.data.shape for s in self.series[:1]}
        if len(shapes) > 1 or any(s.model_tag is not self.model_tag for s in series):
            raise ShapeError("all series in a dataset share model and shape")
        start = len(self)
        self.thetas = np.concatenate([self.thetas, thetas])
        self.series.extend(series)
        self.seeds = np.concatenate([self.seeds, np.asarray(seeds, dtype=np.int64)])
        self.rounds = np.concatenate(
            [self.rounds, np.full(thetas.shape[0], round_index, dtype=np.int64)]
        )
        self._features = None
        return np.arange(start, len(self))

    def features(self) -> np.ndarray:
        if self._features is None:
            self._features = np.stack([s.features() for s in self.series])
        return self._features


# --- proposals -----------------------------------------------------------------------------


class ProposalKind(str, Enum):
    PRIOR = "prior"
    FLOW_AT_OBSERVATION = "flow_at_observation"


@dataclass(frozen=True)
class Proposal:
    kind: ProposalKind
    prior: BoxUniformPrior
    flow: ConditionalFlow | None = None
    observation: TimeSeries | None = None
    embedding: np.ndarray | None = None

    @classmethod
    def from_prior(cls, prior: BoxUniformPrior) -> Proposal:
        return cls(kind=ProposalKind.PRIOR, prior=prior)

    @classmethod
    def at_observation(
        cls, flow: ConditionalFlow, y: TimeSeries, prior: BoxUniformPrior
    ) -> Proposal:
        """Freeze a private copy of the flow; later training cannot reach it."""
        snapshot = flow.copy()
        return cls(
            kind=ProposalKind.FLOW_AT_OBSERVATION,
            prior=prior,
            flow=snapshot,
            observation=y,
            embedding=embed_observation(snapshot, y),
        )

    @property
    def is_prior(self) -> bool:
        return self.kind is ProposalKind.PRIOR

    def sample(self, n: int, seed: int) -> tuple[np.ndarray, float]:
        if self.is_prior:
            return prior_sample(self.prior, n, seed), 1.0
        assert self.flow is not None and self.embedding is not None
        return flow_sample_in_box(self.flow, self.embedding, n, self.prior, seed)

    def log_prob(self, thetas: np.ndarray) -> np.ndarray:
        """log proposal density per row; -inf outside the prior box."""
        thetas = np.atleast_2d(thetas)
        prior_lp = self.prior.log_prob(thetas)
        if self.is_prior:
            return prior_lp
        assert self.flow is not None and self.embedding is not None
        out = np.full(thetas.shape[0], -np.inf)
        inside = np.isfinite(prior_lp)
        if np.any(inside):
            out[inside] = flow_log_prob(self.flow, thetas[inside], self.embedding)
        return out


# --- loss ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class LossContext:
    """Per-round loss setup: plain NLL, or atomic with per-row log weights over the dataset."""

    atomic: bool
    atoms: int = 10
    log_weights: np.ndarray | None = None

    @classmethod
    def plain(cls) -> LossContext:
        return cls(atomic=False)


def build_loss_context(
    dataset: Dataset, proposal: Proposal, prior: BoxUniformPrior, config: TrainConfig
) -> LossContext:
    """Atom log weights are fixed for a round, so they are evaluated once over the dataset."""
    if proposal.is_prior:
        return LossContext.plain()
    prior_lp = prior.log_prob(dataset.thetas)
    inside = np.isfinite(prior_lp)
    weights = np.full(len(dataset), -np.inf)
    if config.atom_weighting == "proposal":
        weights[inside] = proposal.log_prob(dataset.thetas[inside]) - prior_lp[inside]
    else:
        weights[inside] = -prior_lp[inside]
    return LossContext(atomic=True, atoms=config.atoms, log_weights=weights)


def atomic_terms(logits: Var) -> Var:
    """Per-row -log softmax(logits)[0]; column 0 holds each row's own atom."""
    own = ad.reshape(ad.take_cols(logits, 0, 1), (logits.value.shape[0],))
    return ad.logsumexp(logits, axis=1) - own


def atomic_nll(logits: Var) -> Var:
    return ad.sum_(atomic_terms(logits))


def choose_atoms(n: int, atoms: int, rng: np.random.Generator) -> np.ndarray:
    """(n, M) batch positions: each row's own index then M-1 distinct others."""
    m = min(atoms, n)
    keys = rng.random((n, n))
    np.fill_diagonal(keys, np.inf)
    others = np.argsort(keys, axis=1)[:, : m - 1]
    return np.column_stack([np.arange(n), others])


def snpe_loss_terms(
    flow: ConditionalFlow,
    tape: Tape,
    dataset: Dataset,
    batch: np.ndarray,
    context: LossContext,
    rng: np.random.Generator,
) -> Var:
    """Per-pair loss terms, shape (len(batch),)."""
    batch = np.asarray(batch, dtype=np.intp)
    if batch.size == 0:
        raise TrainingError("empty batch")
    emb = flow.embed_var(tape, dataset.features()[batch])
    thetas = dataset.thetas[batch]
    if not context.atomic:
        return -flow.log_prob_var(tape.constant(thetas), emb)

    assert context.log_weights is not None
    n = batch.shape[0]
    if min(context.atoms, n) < 2:
        raise TrainingError("the atomic loss needs at least two atoms per pair")
    positions = choose_atoms(n, context.atoms, rng)
    m = positions.shape[1]
    weights = context.log_weights[batch][positions]
    if np.any(np.all(np.isneginf(weights), axis=1)):
        raise TrainingError("every atom of a pair lies outside the prior support")
    atom_thetas = thetas[positions.ravel()]
    atom_emb = ad.take_rows(emb, np.repeat(np.arange(n), m))
    logq = ad.reshape(flow.log_prob_var(tape.constant(atom_thetas), atom_emb), (n, m))
    return atomic_terms(logq + weights)


def snpe_loss(
    flow: ConditionalFlow,
    tape: Tape,
    dataset: Dataset,
    batch: np.ndarray,
    context: LossContext,
    rng: np.random.Generator,
) -> Var:
    return ad.sum_(snpe_loss_terms(flow, tape, dataset, batch, context, rng))


# --- trainables ----------------------------------------------------------------------------


class Trainable(Protocol):
    """A flow plus the flat vector the optimiser updates."""

    @property
    def flow(self) -> ConditionalFlow: ...

    @property
    def values(self) -> np.ndarray: ...

    def gradient(self, tape: Tape, loss: Var) -> np.ndarray: ...

    def after_update(self) -> None: ...

    def proposal_flow(self) -> ConditionalFlow: ...


class FullParameters:
    """Every flow weight is trainable; hooks on the store see each gradient."""

    def __init__(self, flow: ConditionalFlow):
        self._flow = flow

    @property
    def flow(self) -> ConditionalFlow:
        return self._flow

    @property
    def values(self) -> np.ndarray:
        return self._flow.store.flat

    def gradient(self, tape: Tape, loss: Var) -> np.ndarray:
        return tape.backward(loss, self._flow.store)

    def after_update(self) -> None:
        pass

    def proposal_flow(self) -> ConditionalFlow:
        return self._flow


# --- training ------------------------------------------------------------------------------


@dataclass
class TrainResult:
    initial_loss: float
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    best_val_loss: float

    @property
    def epochs(self) -> int:
        return len(self.train_losses)


def _split_batches(indices: np.ndarray, batch_size: int, atomic: bool) -> list[np.ndarray]:
    batches = [indices[i : i + batch_size] for i in range(0, indices.shape[0], batch_size)]
    if atomic and len(batches) > 1 and batches[-1].shape[0] < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def _mean_loss(
    trainable: Trainable, dataset: Dataset, idx: np.ndarray, context: LossContext, seed: int
) -> float:
    if idx.size == 0:
        return float("nan")
    tape = Tape()
    terms = snpe_loss_terms(
        trainable.flow, tape, dataset, idx, context, np.random.default_rng(seed)
    )
    _check_finite(terms, dataset, idx)
    return float(terms.value.mean())


def _check_finite(terms: Var, dataset: Dataset, batch: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(terms.value))
    if bad.size:
        row = int(batch[bad[0]])
        raise TrainingError(
            f"non-finite loss for pair {row}: theta={dataset.thetas[row].tolist()}, "
            f"seed={int(dataset.seeds[row])}, round={int(dataset.rounds[row])}"
        )


def train_round(
    trainable: Trainable,
    dataset: Dataset,
    context: LossContext,
    config: TrainConfig,
    seed: int,
) -> TrainResult:
    """
    Mini-batch Adam on the round loss with validation-patience early stopping.

    The best-validation parameters are restored before returning. `max_epochs = 0` leaves
    the trainable untouched.
    """
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = int(round(config.val_fraction * len(dataset)))
    if len(dataset) - n_val < (2 if context.atomic else 1):
        n_val = 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    monitor_idx = val_idx if n_val else train_idx
    val_seed = int(rng.integers(2**31))

    state = AdamState.zeros(trainable.values.shape[0])
    adam = config.adam
    initial = _mean_loss(trainable, dataset, train_idx, context, val_seed)
    best_val = _mean_loss(trainable, dataset, monitor_idx, context, val_seed)
    best_values = trainable.values.copy()
    best_epoch, stale = 0, 0
    train_losses: list[float] = []
    val_losses: list[float] = []

    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        for batch in _split_batches(rng.permutation(train_idx), config.batch_size, context.atomic):
            tape = Tape()
            terms = snpe_loss_terms(trainable.flow, tape, dataset, batch, context, rng)
            _check_finite(terms, dataset, batch)
            loss = ad.sum_(terms)
            adam_update(trainable.values, trainable.gradient(tape, loss), state, adam)
            trainable.after_update()
            total += float(loss.value)
        train_losses.append(total / train_idx.shape[0])
        val = _mean_loss(trainable, dataset, monitor_idx, context, val_seed)
        val_losses.append(val)
        log_event(
            "train.epoch",
            level=logging.DEBUG,
            epoch=epoch,
            train_loss=train_losses[-1],
            val_loss=val,
        )
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_values = trainable.values.copy()
        else:
            stale += 1
            if stale >= config.patience:
                break

    if best_epoch != len(train_losses):
        trainable.values[...] = best_values
        trainable.after_update()
    return TrainResult(initial, train_losses, val_losses, best_epoch, best_val)


# --- round loop ----------------------------------------------------------------------------


@dataclass
class RoundRecord:
    round_index: int
    n_sims: int
    acceptance: float
    train: TrainResult
    wall_seconds: float


@dataclass
class SNPEResult:
    flow: ConditionalFlow
    proposals: list[Proposal]
    dataset: Dataset
    rounds: list[RoundRecord]
    trainable: Trainable


class RoundStrategy(Protocol):
    """Per-round customisation of what is trained and how its gradients are shaped."""

    def prepare(
        self,
        round_index: int,
        trainable: Trainable,
        dataset: Dataset,
        fresh: np.ndarray,
        context: LossContext,
        seed: int,
    ) -> Trainable: ...

    def finish(self, round_index: int, trainable: Trainable) -> Trainable: ...


def run_rounds(
    trainable: Trainable,
    prior: BoxUniformPrior,
    simulator: Simulator,
    y: TimeSeries,
    schedule: RoundSchedule,
    seed: int,
    strategy: RoundStrategy | None = None,
    workers: int = 1,
) -> SNPEResult:
    if trainable.flow.config.theta_dim != prior.dim:
        raise ShapeError("flow and prior disagree on the parameter dimension")
    dataset = Dataset.empty(y.model_tag, prior.dim)
    proposal = Proposal.from_prior(prior)
    proposals = [proposal]
    records: list[RoundRecord] = []
    round_seeds = derive_seeds(seed, schedule.n_rounds)

    for m, n_sims in enumerate(schedule.sims_per_round):
        started = time.perf_counter()
        log_event("snpe.round.start", round=m, n_sims=n_sims, proposal=proposal.kind.value)
        draw_seed, sim_seed, train_seed, strategy_seed = (
            int(s) for s in derive_seeds(int(round_seeds[m]), 4)
        )
        try:
            thetas, acceptance = proposal.sample(n_sims, draw_seed)
            sim_seeds = derive_seeds(sim_seed, n_sims)
            series = simulate_batch(simulator, thetas, sim_seeds, workers=workers)
            fresh = dataset.extend(thetas, series, sim_seeds, m)
            if m == 0:
                trainable.flow.fit_standardizer(dataset.features())
            context = build_loss_context(dataset, proposal, prior, schedule.train)
            if strategy is not None:
                trainable = strategy.prepare(m, trainable, dataset, fresh, context, strategy_seed)
            result = train_round(trainable, dataset, context, schedule.train, train_seed)
            if strategy is not None:
                trainable = strategy.finish(m, trainable)
            proposal = Proposal.at_observation(trainable.proposal_flow(), y, prior)
        except SBIError as exc:
            raise RoundError(m, exc) from exc
        proposals.append(proposal)
        wall = time.perf_counter() - started
        records.append(RoundRecord(m, n_sims, acceptance, result, wall))
        log_event(
            "snpe.round.end",
            round=m,
            n_sims=len(dataset),
            epochs=result.epochs,
            best_val_loss=result.best_val_loss,
            wall_seconds=wall,
        )

    return SNPEResult(
        flow=trainable.proposal_flow().copy(),
        proposals=proposals[:-1],
        dataset=dataset,
        rounds=records,
        trainable=trainable,
    )


def run_snpe(
    prior: BoxUniformPrior,
    simulator: Simulator,
    y: TimeSeries,
    flow: ConditionalFlow,
    schedule: RoundSchedule,
    seed: int,
    workers: int = 1,
) -> SNPEResult:
    """Train `flow` in place from its current weights; returns the final flow and history."""
    return run_rounds(FullParameters(flow), prior, simulator, y, schedule, seed, workers=workers)
