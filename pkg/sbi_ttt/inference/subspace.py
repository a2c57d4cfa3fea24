from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from sbi_ttt.errors import ArtifactError, ConfigError, NonFiniteGradientError, SubspaceError
from sbi_ttt.events import log_event
from sbi_ttt.inference.snpe import Dataset, LossContext, snpe_loss
from sbi_ttt.models.autodiff import Tape
from sbi_ttt.models.flow import ConditionalFlow
from sbi_ttt.models.schema import load_document, write_document

SUBSPACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SubspaceSpec:
    """Either a fixed rank or an energy threshold, plus the snapshot budget."""

    rank: int | None = 8
    energy: float | None = None
    n_batches: int = 32
    batch_size: int = 32

    def __post_init__(self) -> None:
        if (self.rank is None) == (self.energy is None):
            raise ConfigError("give exactly one of rank or energy")
        if self.rank is not None and self.rank < 1:
            raise ConfigError("rank must be at least 1")
        if self.energy is not None and not 0.0 < self.energy <= 1.0:
            raise ConfigError("energy threshold must lie in (0, 1]")
        if self.n_batches < 1 or self.batch_size < 1:
            raise ConfigError("snapshot batch count and size must be positive")


@dataclass(frozen=True)
class GradSubspace:
    basis: np.ndarray  # (d, r), orthonormal columns
    singular_values: np.ndarray
    rank: int
    energy_fraction: float

    def coefficients(self, g: np.ndarray) -> np.ndarray:
        return self.basis.T @ g

    def project(self, g: np.ndarray) -> np.ndarray:
        return project_gradient(self, g)


def energy_rank(singular_values: np.ndarray, tau: float) -> int:
    """Smallest r with sum_{i<=r} s_i^2 / sum_i s_i^2 >= tau."""
    energy = np.cumsum(np.square(singular_values))
    fractions = energy / energy[-1]
    return int(np.argmax(fractions >= tau)) + 1


def compute_subspace(
    G: np.ndarray, spec: SubspaceSpec, snapshot_batch_size: int | None = None
) -> GradSubspace:
    """SVD basis of the snapshot columns; `snapshot_batch_size` is only reported."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    d, n_cols = G.shape
    if not np.any(G):
        raise SubspaceError("gradient snapshot matrix is all zeros")
    if spec.rank is not None and spec.rank > min(d, n_cols):
        raise SubspaceError(f"rank {spec.rank} exceeds min(d={d}, B={n_cols})")
    U, s, _ = np.linalg.svd(G, full_matrices=False)
    if spec.rank is not None:
        rank = spec.rank
    else:
        assert spec.energy is not None
        rank = energy_rank(s, spec.energy)
    total = float(np.sum(s**2))
    fraction = float(np.sum(s[:rank] ** 2) / total)
    subspace = GradSubspace(
        basis=np.ascontiguousarray(U[:, :rank]),
        singular_values=s,
        rank=rank,
        energy_fraction=min(fraction, 1.0),
    )
    log_event(
        "adapt.subspace",
        rank=rank,
        energy_fraction=subspace.energy_fraction,
        top_singular_values=s[: min(rank, 8)],
        n_snapshots=n_cols,
        snapshot_batch_size=snapshot_batch_size,
    )
    return subspace


def project_gradient(subspace: GradSubspace, g: np.ndarray) -> np.ndarray:
    """U (U^T g) as two thin products; the d x d projector is never formed."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (subspace.basis.shape[0],):
        raise SubspaceError(f"gradient of shape {g.shape} does not match the basis")
    return subspace.basis @ (subspace.basis.T @ g)


def snapshot_batches(
    indices: np.ndarray, n_batches: int, batch_size: int, seed: int
) -> list[np.ndarray]:
    """Disjoint mini-batches of min(batch_size, len // n_batches) pairs each."""
    indices = np.asarray(indices)
    if indices.shape[0] < n_batches:
        raise SubspaceError(f"{indices.shape[0]} pairs cannot fill {n_batches} snapshot batches")
    size = min(batch_size, indices.shape[0] // n_batches)
    order = np.random.default_rng(seed).permutation(indices)
    return [order[b * size : (b + 1) * size] for b in range(n_batches)]


def snapshot_gradients(
    flow0: ConditionalFlow,
    dataset: Dataset,
    batches: Sequence[np.ndarray],
    context: LossContext,
    seed: int,
) -> np.ndarray:
    """
    Columns g_b = grad L(phi0; batch_b), all evaluated at the weights of `flow0`.

    Every batch draws its atoms from a generator seeded with `seed`, so equal batches
    give equal columns.
    """
    columns = []
    for b, batch in enumerate(batches):
        tape = Tape()
        loss = snpe_loss(flow0, tape, dataset, batch, context, np.random.default_rng(seed))
        g = tape.backward(loss, flow0.store)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient snapshot in batch {b}")
        columns.append(g)
    return np.column_stack(columns)


def collect_gradient_snapshots(
    flow0: ConditionalFlow,
    dataset: Dataset,
    portion: np.ndarray,
    n_batches: int,
    context: LossContext,
    seed: int,
    batch_size: int = 32,
) -> np.ndarray:
    batches = snapshot_batches(portion, n_batches, batch_size, seed)
    return snapshot_gradients(flow0, dataset, batches, context, seed)


# --- checkpoint document ---------------------------------------------------------------


class SubspaceCheckpoint(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    rank: int
    energy_fraction: float
    singular_values: list[float]
    basis: list[list[float]]


def save_subspace(subspace: GradSubspace, path: str | Path) -> Path:
    doc = SubspaceCheckpoint(
        schema_version=SUBSPACE_SCHEMA_VERSION,
        rank=subspace.rank,
        energy_fraction=subspace.energy_fraction,
        singular_values=subspace.singular_values.tolist(),
        basis=subspace.basis.tolist(),
    )
    return write_document(path, doc)


def load_subspace(path: str | Path) -> GradSubspace:
    doc = load_document(path, SubspaceCheckpoint)
    if doc.schema_version != SUBSPACE_SCHEMA_VERSION:
        raise ArtifactError(f"{path}: subspace schema {doc.schema_version} unsupported")
    return GradSubspace(
        basis=np.asarray(doc.basis, dtype=np.float64).reshape(-1, doc.rank),
        singular_values=np.asarray(doc.singular_values),
        rank=doc.rank,
        energy_fraction=doc.energy_fraction,
    )
