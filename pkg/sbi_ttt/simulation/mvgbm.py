from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import multivariate_normal

from sbi_ttt.errors import ConfigError, DegenerateDensityError, ShapeError
from sbi_ttt.simulation.types import ModelTag, ParameterVector, TimeSeries, as_parameter_vector

DEFAULT_SIGMA = ((0.5, 0.1, 0.0), (0.0, 0.1, 0.3), (0.0, 0.0, 0.2))


@dataclass(frozen=True)
class MVGBMConfig:
    """
    Multivariate geometric Brownian motion observed at `horizon` equally spaced points.

    The observation includes X_0, so a series has `horizon - 1` transitions. `sigma` is
    used directly as the noise mixing matrix; the log-increment covariance is
    sigma @ sigma.T * dt.
    """

    sigma: tuple[tuple[float, ...], ...] = DEFAULT_SIGMA
    horizon: int = 100
    dt: float | None = None
    x0: tuple[float, ...] | None = None
    _sigma: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ConfigError(f"sigma must be square, got shape {sigma.shape}")
        if self.horizon < 2:
            raise ConfigError(f"horizon must be >= 2, got {self.horizon}")
        if self.dt is None:
            object.__setattr__(self, "dt", 1.0 / (self.horizon - 1))
        if not self.dt > 0.0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.x0 is None:
            object.__setattr__(self, "x0", (1.0,) * sigma.shape[0])
        if len(self.x0) != sigma.shape[0] or min(self.x0) <= 0.0:
            raise ConfigError("x0 must hold d strictly positive values")
        sigma.setflags(write=False)
        object.__setattr__(self, "_sigma", sigma)

    @property
    def dim(self) -> int:
        return int(self._sigma.shape[0])

    @property
    def sigma_matrix(self) -> np.ndarray:
        return self._sigma

    @property
    def gamma(self) -> np.ndarray:
        """gamma_i = 1/2 sum_j sigma_ij^2, always derived from sigma."""
        return 0.5 * (self._sigma**2).sum(axis=1)

    @property
    def covariance(self) -> np.ndarray:
        return self._sigma @ self._sigma.T * self.dt


def simulate_mvgbm(config: MVGBMConfig, theta: ParameterVector, seed: int) -> TimeSeries:
    """
    Exact discretisation: log X_{t+dt} = log X_t + (theta - gamma) dt + sigma z sqrt(dt).

    z is `default_rng(seed).standard_normal((horizon - 1, d))`.
    """
    theta = as_parameter_vector(theta, config.dim)
    z = np.random.default_rng(seed).standard_normal((config.horizon - 1, config.dim))
    increments = (theta - config.gamma) * config.dt + z @ config.sigma_matrix.T * math.sqrt(
        config.dt
    )
    log_path = np.vstack([np.log(config.x0), np.log(config.x0) + np.cumsum(increments, axis=0)])
    return TimeSeries(data=np.exp(log_path), model_tag=ModelTag.MVGBM)


def mvgbm_loglik(config: MVGBMConfig, theta: ParameterVector, series: TimeSeries) -> float:
    """
    Log-density of X_{1:T} given X_0.

    Each step scores log X_{t+dt} under N(log X_t + (theta - gamma) dt, sigma sigma^T dt)
    and adds the change-of-variables term -sum_i log X_{t+dt,i}: the density is over X,
    not over log X.
    """
    theta = as_parameter_vector(theta, config.dim)
    data = series.data
    if data.shape[1] != config.dim:
        raise ShapeError(f"series has {data.shape[1]} dims, config expects {config.dim}")
    if np.any(data <= 0.0):
        raise DegenerateDensityError("MVGBM likelihood requires strictly positive values")
    log_x = np.log(data)
    increments = np.diff(log_x, axis=0)
    mean = (theta - config.gamma) * config.dt
    try:
        dist = multivariate_normal(mean=mean, cov=config.covariance)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise DegenerateDensityError(f"singular increment covariance: {exc}") from exc
    log_density = np.atleast_1d(dist.logpdf(increments))
    return float(log_density.sum() - log_x[1:].sum())
