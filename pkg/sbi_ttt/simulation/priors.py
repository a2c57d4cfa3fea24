from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sbi_ttt.errors import ConfigError, ShapeError
from sbi_ttt.simulation.types import ParameterVector


@dataclass(frozen=True)
class BoxUniformPrior:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError("lower and upper must be vectors of equal length")
        if not np.all(lo < hi):
            raise ConfigError(f"every lower bound must be below its upper bound: {lo} vs {hi}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lows(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def highs(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.highs - self.lows

    def contains(self, theta: np.ndarray) -> np.ndarray:
        """Row-wise support test for an (n, d) array; a single vector gives a 0-d bool."""
        t = np.asarray(theta, dtype=np.float64)
        if t.shape[-1] != self.dim:
            raise ShapeError(f"expected trailing dimension {self.dim}, got {t.shape}")
        return np.all((t >= self.lows) & (t <= self.highs), axis=-1)

    def sample(self, n: int, seed: int) -> np.ndarray:
        return prior_sample(self, n, seed)

    def log_prob(self, theta: np.ndarray) -> np.ndarray:
        inside = self.contains(theta)
        log_volume = float(np.log(self.widths).sum())
        return np.where(inside, -log_volume, -np.inf)


def prior_sample(prior: BoxUniformPrior, n: int, seed: int) -> np.ndarray:
    """n draws, shape (n, d), uniform in the box."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    return rng.uniform(prior.lows, prior.highs, size=(n, prior.dim))


def prior_logpdf(prior: BoxUniformPrior, theta: ParameterVector) -> float:
    return float(prior.log_prob(np.asarray(theta, dtype=np.float64)))
