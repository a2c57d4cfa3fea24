from __future__ import annotations

import numpy as np
import ot
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import cdist, pdist

from sbi_ttt.errors import MetricError
from sbi_ttt.events import log_event

METRIC_SCHEMA_VERSION = 1
EMD_MAX_ITER = 10_000_000


def as_sample_set(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or points.shape[0] < 1:
        raise MetricError(f"a sample set is a non-empty (n, d) array, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise MetricError("sample set contains non-finite entries")
    return points


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_sample_set(a), as_sample_set(b)
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def wasserstein(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 1-Wasserstein distance between empirical measures, Euclidean ground cost."""
    a, b = _pair(a, b)
    cost = cdist(a, b, metric="euclidean")
    value = ot.emd2(ot.unif(a.shape[0]), ot.unif(b.shape[0]), cost, numItermax=EMD_MAX_ITER)
    return max(float(value), 0.0)


def median_heuristic(pooled: np.ndarray) -> float:
    """
    Median squared distance over all unordered pairs, zero distances included.

    When duplicates make the median zero, the smallest positive squared distance is used.
    """
    pooled = as_sample_set(pooled)
    if pooled.shape[0] < 2:
        raise MetricError("the median heuristic needs at least two points")
    distances = pdist(pooled, metric="sqeuclidean")
    eta_sq = float(np.median(distances))
    if eta_sq > 0.0:
        return eta_sq
    positive = distances[distances > 0.0]
    if positive.size == 0:
        raise MetricError("all points coincide; RBF bandwidth undefined")
    log_event("metrics.bandwidth.fallback", eta_sq=float(positive.min()))
    return float(positive.min())


def mmd_squared(a: np.ndarray, b: np.ndarray) -> float:
    """Biased (V-statistic) squared MMD with an RBF kernel at the median-heuristic bandwidth."""
    a, b = _pair(a, b)
    eta_sq = median_heuristic(np.concatenate([a, b]))

    def kernel_mean(x: np.ndarray, y: np.ndarray) -> float:
        return float(np.exp(-cdist(x, y, metric="sqeuclidean") / (2.0 * eta_sq)).mean())

    value = kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b)
    return max(value, 0.0)


class MetricReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = METRIC_SCHEMA_VERSION
    task: str
    method: str
    wass: float
    mmd_sq: float
    n_ref: int
    n_est: int
    seeds: list[int]
    timestamp: str


def evaluate_samples(
    estimate: np.ndarray,
    reference: np.ndarray,
    *,
    task: str,
    method: str,
    seeds: list[int],
    timestamp: str,
) -> MetricReport:
    estimate, reference = _pair(estimate, reference)
    return MetricReport(
        task=task,
        method=method,
        wass=wasserstein(estimate, reference),
        mmd_sq=mmd_squared(estimate, reference),
        n_ref=reference.shape[0],
        n_est=estimate.shape[0],
        seeds=seeds,
        timestamp=timestamp,
    )
