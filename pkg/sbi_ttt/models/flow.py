"""
Conditional affine-coupling flow q(theta | x).

Direction convention: `transform` maps parameters to the base space (theta -> u) and
gives the density through the change of variables; `inverse` maps base draws back to
parameters and is what sampling uses. Each coupling layer keeps the coordinates where
its mask is 1 and scales and shifts the others with a conditioner MLP fed
[theta * mask || embedding].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from sbi_ttt.errors import ArtifactError, ConfigError, ProposalError, ShapeError, TrainingError
from sbi_ttt.events import log_event
from sbi_ttt.models import autodiff as ad
from sbi_ttt.models.autodiff import Tape, Var
from sbi_ttt.models.nn import ParamSource, StoreParams, mlp_block_specs, mlp_forward, weight_name
from sbi_ttt.models.schema import load_document, write_document
from sbi_ttt.models.store import (
    BlockSpec,
    FlowParameterStore,
    StoreDocument,
    init_store,
    store_from_document,
    store_to_document,
)
from sbi_ttt.simulation.priors import BoxUniformPrior
from sbi_ttt.simulation.types import TimeSeries

FLOW_SCHEMA_VERSION = 1
STD_GUARD = 1e-8
EMBED_PREFIX = "embed"
MAX_PROPOSAL_DRAWS = 1_000_000
MIN_ACCEPTANCE = 1e-4


@dataclass(frozen=True)
class FlowConfig:
    theta_dim: int
    feature_dim: int
    n_layers: int = 5
    hidden_sizes: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    embed_hidden: tuple[int, ...] = (64,)
    scale_clamp: float = 3.0

    def __post_init__(self) -> None:
        if self.theta_dim < 1 or self.feature_dim < 1:
            raise ConfigError("theta_dim and feature_dim must be positive")
        if self.n_layers < 2:
            raise ConfigError("a flow needs at least two coupling layers")
        if self.embed_dim < 1 or any(h < 1 for h in (*self.hidden_sizes, *self.embed_hidden)):
            raise ConfigError("layer widths must be positive")
        if self.scale_clamp <= 0:
            raise ConfigError("scale_clamp must be positive")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "embed_hidden", tuple(int(h) for h in self.embed_hidden))

    def mask(self, layer: int) -> np.ndarray:
        """1 marks a conditioning coordinate, 0 a transformed one; alternates by layer."""
        if self.theta_dim == 1:
            return np.zeros(1)
        return ((np.arange(self.theta_dim) + layer) % 2).astype(np.float64)

    def block_specs(self) -> list[BlockSpec]:
        specs = mlp_block_specs(
            EMBED_PREFIX, [self.feature_dim, *self.embed_hidden, self.embed_dim]
        )
        for k in range(self.n_layers):
            sizes = [self.theta_dim + self.embed_dim, *self.hidden_sizes, 2 * self.theta_dim]
            specs.extend(mlp_block_specs(coupling_prefix(k), sizes))
        return specs

    def output_weight(self, layer: int) -> str:
        return weight_name(coupling_prefix(layer), len(self.hidden_sizes))


def coupling_prefix(layer: int) -> str:
    return f"coupling{layer}"


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine standardisation, fit once on round-0 simulations and then frozen."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> Standardizer:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return cls(
            mean=features.mean(axis=0),
            std=np.maximum(features.std(axis=0), STD_GUARD),
        )

    @classmethod
    def identity(cls, feature_dim: int) -> Standardizer:
        return cls(mean=np.zeros(feature_dim), std=np.ones(feature_dim))

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.mean.shape[0]:
            raise ShapeError(
                f"expected {self.mean.shape[0]} features, got {features.shape[1]}"
            )
        return (features - self.mean) / self.std


@dataclass
class ConditionalFlow:
    config: FlowConfig
    store: FlowParameterStore
    standardizer: Standardizer | None = None
    _source: ParamSource | None = field(default=None, repr=False)

    @classmethod
    def build(cls, config: FlowConfig, seed: int) -> ConditionalFlow:
        """Glorot-initialised flow whose conditioner output layers are zero (identity map)."""
        outputs = {config.output_weight(k) for k in range(config.n_layers)}
        store = init_store(config.block_specs(), seed, zero_blocks=lambda n: n in outputs)
        return cls(config=config, store=store)

    def __post_init__(self) -> None:
        if list(self.store.specs) != self.config.block_specs():
            raise ArtifactError("parameter store layout does not match the flow config")

    @property
    def source(self) -> ParamSource:
        return self._source if self._source is not None else StoreParams(self.store)

    def with_source(self, source: ParamSource) -> ConditionalFlow:
        """Same architecture and standardiser, weights read through `source`."""
        return ConditionalFlow(self.config, source.layout, self.standardizer, source)

    def with_store(self, store: FlowParameterStore) -> ConditionalFlow:
        return ConditionalFlow(self.config, store, self.standardizer)

    def copy(self) -> ConditionalFlow:
        return ConditionalFlow(self.config, self.store.copy(), self.standardizer)

    def fit_standardizer(self, features: np.ndarray) -> None:
        if self.standardizer is None:
            self.standardizer = Standardizer.fit(features)

    # --- differentiable pieces -----------------------------------------------------------

    def embed_var(self, tape: Tape, features: np.ndarray) -> Var:
        scaler = self.standardizer or Standardizer.identity(self.config.feature_dim)
        x = tape.constant(scaler.transform(features))
        return mlp_forward(self.source, EMBED_PREFIX, x)

    def _scale_shift(self, layer: int, z: Var, emb: Var) -> tuple[Var, Var]:
        d = self.config.theta_dim
        mask = self.config.mask(layer)
        out = mlp_forward(self.source, coupling_prefix(layer), ad.concat_cols(z * mask, emb))
        clamp = self.config.scale_clamp
        s = ad.tanh(ad.take_cols(out, 0, d) * (1.0 / clamp)) * (clamp * (1.0 - mask))
        t = ad.take_cols(out, d, 2 * d) * (1.0 - mask)
        return s, t

    def transform_var(self, theta: Var, emb: Var) -> tuple[Var, Var]:
        """theta -> u with the summed log |det J| of the forward map."""
        z = theta
        logdet: Var | None = None
        for layer in range(self.config.n_layers):
            mask = self.config.mask(layer)
            s, t = self._scale_shift(layer, z, emb)
            z = z * mask + (z * ad.exp(s) + t) * (1.0 - mask)
            layer_logdet = ad.sum_(s, axis=1)
            logdet = layer_logdet if logdet is None else logdet + layer_logdet
        assert logdet is not None
        return z, logdet

    def inverse_var(self, u: Var, emb: Var) -> tuple[Var, Var]:
        """u -> theta with the summed log |det J| of the inverse map."""
        z = u
        logdet: Var | None = None
        for layer in reversed(range(self.config.n_layers)):
            mask = self.config.mask(layer)
            s, t = self._scale_shift(layer, z, emb)
            z = z * mask + ((z - t) * ad.exp(-s)) * (1.0 - mask)
            layer_logdet = -ad.sum_(s, axis=1)
            logdet = layer_logdet if logdet is None else logdet + layer_logdet
        assert logdet is not None
        return z, logdet

    def log_prob_var(self, theta: Var, emb: Var) -> Var:
        u, logdet = self.transform_var(theta, emb)
        return ad.gaussian_logpdf(u) + logdet

    # --- array helpers ----------------------------------------------------------------------

    def _rows(self, theta: np.ndarray, emb: np.ndarray) -> tuple[Tape, Var, Var]:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        emb = np.atleast_2d(np.asarray(emb, dtype=np.float64))
        if theta.shape[1] != self.config.theta_dim:
            raise ShapeError(f"expected theta of dimension {self.config.theta_dim}")
        if emb.shape[1] != self.config.embed_dim:
            raise ShapeError(f"expected embedding of width {self.config.embed_dim}")
        if emb.shape[0] == 1 and theta.shape[0] > 1:
            emb = np.repeat(emb, theta.shape[0], axis=0)
        if emb.shape[0] != theta.shape[0]:
            raise ShapeError("theta and embedding row counts differ")
        tape = Tape()
        return tape, tape.constant(theta), tape.constant(emb)

    def transform(self, theta: np.ndarray, emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, t, e = self._rows(theta, emb)
        u, logdet = self.transform_var(t, e)
        return u.value, logdet.value

    def inverse(self, u: np.ndarray, emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, z, e = self._rows(u, emb)
        theta, logdet = self.inverse_var(z, e)
        return theta.value, logdet.value


def embed_observation(flow: ConditionalFlow, x: TimeSeries) -> np.ndarray:
    features = x.features()
    if features.shape[0] != flow.config.feature_dim:
        raise ShapeError(
            f"series gives {features.shape[0]} features, flow expects {flow.config.feature_dim}"
        )
    return flow.embed_var(Tape(), features[None, :]).value[0]


def flow_log_prob(flow: ConditionalFlow, theta: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """log q(theta | e) per row of theta; a single vector gives a 0-d array."""
    single = np.ndim(theta) == 1
    _, t, e = flow._rows(theta, emb)
    out = flow.log_prob_var(t, e).value
    if not np.all(np.isfinite(out)):
        raise TrainingError("non-finite flow log-density")
    return out[0] if single else out


def flow_sample(flow: ConditionalFlow, emb: np.ndarray, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ConfigError("n must be at least 1")
    u = np.random.default_rng(seed).standard_normal((n, flow.config.theta_dim))
    return flow.inverse(u, emb)[0]


def flow_sample_in_box(
    flow: ConditionalFlow,
    emb: np.ndarray,
    n: int,
    prior: BoxUniformPrior,
    seed: int,
    max_draws: int = MAX_PROPOSAL_DRAWS,
) -> tuple[np.ndarray, float]:
    """
    Rejection-sample n flow draws that fall inside the prior box.

    The first batch uses the same base draws as `flow_sample(flow, emb, n, seed)`, so an
    unbounded box reproduces it exactly. Returns the samples and the acceptance rate.
    """
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = np.random.default_rng(seed)
    kept: list[np.ndarray] = []
    accepted = drawn = 0
    batch = n
    while accepted < n:
        if drawn >= max_draws and accepted < MIN_ACCEPTANCE * drawn:
            raise ProposalError(
                f"proposal acceptance {accepted / drawn:.2e} below {MIN_ACCEPTANCE:g} "
                f"after {drawn} draws"
            )
        u = rng.standard_normal((batch, flow.config.theta_dim))
        theta = flow.inverse(u, emb)[0]
        inside = theta[prior.contains(theta)]
        kept.append(inside)
        accepted += inside.shape[0]
        drawn += batch
        rate = max(accepted / drawn, 1.0 / drawn)
        batch = int(min(max((n - accepted) / rate * 1.2, 100), 100_000))
    acceptance = accepted / drawn
    log_event("proposal.acceptance", n=n, drawn=drawn, acceptance=acceptance)
    return np.concatenate(kept)[:n], acceptance


# --- checkpoint document ---------------------------------------------------------------


class FlowConfigEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    theta_dim: int
    feature_dim: int
    n_layers: int
    hidden_sizes: list[int]
    embed_dim: int
    embed_hidden: list[int]
    scale_clamp: float


class StandardizerEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mean: list[float]
    std: list[float]


class FlowCheckpoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    flow_config: FlowConfigEntry
    standardizer: StandardizerEntry | None
    parameters: StoreDocument


def flow_config_entry(config: FlowConfig) -> FlowConfigEntry:
    return FlowConfigEntry(
        theta_dim=config.theta_dim,
        feature_dim=config.feature_dim,
        n_layers=config.n_layers,
        hidden_sizes=list(config.hidden_sizes),
        embed_dim=config.embed_dim,
        embed_hidden=list(config.embed_hidden),
        scale_clamp=config.scale_clamp,
    )


def flow_config_from_entry(entry: FlowConfigEntry) -> FlowConfig:
    return FlowConfig(
        theta_dim=entry.theta_dim,
        feature_dim=entry.feature_dim,
        n_layers=entry.n_layers,
        hidden_sizes=tuple(entry.hidden_sizes),
        embed_dim=entry.embed_dim,
        embed_hidden=tuple(entry.embed_hidden),
        scale_clamp=entry.scale_clamp,
    )


def save_flow(flow: ConditionalFlow, path: str | Path) -> Path:
    scaler = flow.standardizer
    doc = FlowCheckpoint(
        schema_version=FLOW_SCHEMA_VERSION,
        flow_config=flow_config_entry(flow.config),
        standardizer=(
            None
            if scaler is None
            else StandardizerEntry(mean=scaler.mean.tolist(), std=scaler.std.tolist())
        ),
        parameters=store_to_document(flow.store),
    )
    return write_document(path, doc)


def load_flow(path: str | Path) -> ConditionalFlow:
    doc = load_document(path, FlowCheckpoint)
    if doc.schema_version != FLOW_SCHEMA_VERSION:
        raise ArtifactError(
            f"{path}: flow schema {doc.schema_version} != supported {FLOW_SCHEMA_VERSION}"
        )
    scaler = None
    if doc.standardizer is not None:
        scaler = Standardizer(
            mean=np.asarray(doc.standardizer.mean), std=np.asarray(doc.standardizer.std)
        )
    return ConditionalFlow(
        config=flow_config_from_entry(doc.flow_config),
        store=store_from_document(doc.parameters),
        standardizer=scaler,
    )
