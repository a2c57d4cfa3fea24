from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from sbi_ttt.errors import (
    ConfigError,
    CorruptedTrajectoryError,
    DegenerateDensityError,
    ExplosiveDynamicsError,
    ShapeError,
)
from sbi_ttt.simulation.types import ModelTag, ParameterVector, TimeSeries, as_parameter_vector

N_TYPES = 4
THETA_DIM = 4  # (g2, b2, g3, b3)


@dataclass(frozen=True)
class BHConfig:
    """
    Brock-Hommes heterogeneous-beliefs market with H=4 trader types.

    Types 1 and 4 are fixed by `fixed_rules = (g1, b1, g4, b4)`; theta carries the
    rules of types 2 and 3. R, sigma, horizon and initial states are not given by the
    model description, the defaults are the usual magnitudes from the literature.
    """

    beta: float
    gross_rate: float = 1.01
    noise_sigma: float = 0.04
    fixed_rules: tuple[float, float, float, float] = (0.0, 0.0, 1.01, 0.0)
    horizon: int = 100
    burn_in: int = 0
    init_states: tuple[float, float, float] = (0.0, 0.0, 0.0)
    divergence_guard: float = 1e6

    def __post_init__(self) -> None:
        if not self.beta >= 0.0:
            # beta = 0 is accepted as the linear limit of the choice model
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if not self.gross_rate > 1.0:
            raise ConfigError(f"gross_rate must exceed 1, got {self.gross_rate}")
        if not self.noise_sigma >= 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.horizon < 4:
            raise ConfigError(f"horizon must be >= 4, got {self.horizon}")
        if self.burn_in < 0:
            raise ConfigError(f"burn_in must be >= 0, got {self.burn_in}")
        if len(self.fixed_rules) != 4 or len(self.init_states) != 3:
            raise ConfigError("fixed_rules needs 4 values and init_states needs 3")
        if not self.divergence_guard > 0.0:
            raise ConfigError("divergence_guard must be positive")


def trading_rules(config: BHConfig, theta: ParameterVector) -> tuple[np.ndarray, np.ndarray]:
    """Trend coefficients g_h and biases b_h for all H types."""
    g2, b2, g3, b3 = as_parameter_vector(theta, THETA_DIM)
    g1, b1, g4, b4 = config.fixed_rules
    return np.array([g1, g2, g3, g4]), np.array([b1, b2, b3, b4])


def _utilities(
    config: BHConfig, g: np.ndarray, b: np.ndarray, x2: np.ndarray, x1: np.ndarray, x0: np.ndarray
) -> np.ndarray:
    # U_h = (x_t - R x_{t-1}) (g_h x_{t-2} + b_h - R x_{t-1}), broadcast over trailing axis h
    R = config.gross_rate
    excess = (x0 - R * x1)[..., None]
    forecast_error = g * x2[..., None] + b - (R * x1)[..., None]
    return excess * forecast_error


def bh_strategy_fractions(
    config: BHConfig, theta: ParameterVector, state: tuple[float, float, float]
) -> np.ndarray:
    """Discrete-choice fractions n_{h,t+1} from state (x_{t-2}, x_{t-1}, x_t)."""
    state_arr = np.asarray(state, dtype=np.float64)
    if state_arr.shape != (3,):
        raise ShapeError(f"state must hold 3 values, got shape {state_arr.shape}")
    if not np.all(np.isfinite(state_arr)):
        raise CorruptedTrajectoryError(f"non-finite state {state_arr.tolist()}")
    g, b = trading_rules(config, theta)
    u = _utilities(config, g, b, state_arr[0:1], state_arr[1:2], state_arr[2:3])[0]
    # scipy's softmax subtracts the max, so large beta cannot overflow
    return softmax(config.beta * u)


def _conditional_mean(
    config: BHConfig, theta: ParameterVector, x2: np.ndarray, x1: np.ndarray, x0: np.ndarray
) -> np.ndarray:
    g, b = trading_rules(config, theta)
    fractions = softmax(config.beta * _utilities(config, g, b, x2, x1, x0), axis=-1)
    forecasts = g * x0[..., None] + b
    return (fractions * forecasts).sum(axis=-1) / config.gross_rate


def simulate_bh(config: BHConfig, theta: ParameterVector, seed: int) -> TimeSeries:
    """
    Simulate T post-burn-in values of the price deviation x_t.

    The noise stream is `default_rng(seed).normal(0, sigma, burn_in + T)`, drawn up front
    so the trajectory can be replayed from the same draws.
    """
    theta = as_parameter_vector(theta, THETA_DIM)
    n_steps = config.burn_in + config.horizon
    eps = np.random.default_rng(seed).normal(0.0, config.noise_sigma, size=n_steps)

    x = np.empty(n_steps + 3)
    x[:3] = config.init_states
    R = config.gross_rate
    guard = config.divergence_guard
    for t in range(n_steps):
        state = x[t : t + 3]
        if not np.all(np.isfinite(state)):
            raise CorruptedTrajectoryError(f"non-finite state at step {t}")
        mean = _conditional_mean(config, theta, state[0:1], state[1:2], state[2:3])[0]
        x_next = mean + eps[t] / R
        if not math.isfinite(x_next) or abs(x_next) > guard:
            raise ExplosiveDynamicsError(
                f"|x| exceeded {guard:g} at step {t} for theta={theta.tolist()}"
            )
        x[t + 3] = x_next
    return TimeSeries(data=x[3 + config.burn_in :], model_tag=ModelTag.BH)


def bh_transition_logpdf(
    config: BHConfig,
    theta: ParameterVector,
    history: tuple[float, float, float],
    next_value: float,
) -> float:
    """log N(y_{t+1}; f(y_{t-2:t}; theta), sigma^2 / R^2)."""
    if config.noise_sigma == 0.0:
        raise DegenerateDensityError("transition density undefined for noise_sigma = 0")
    h = np.asarray(history, dtype=np.float64)
    mean = _conditional_mean(config, theta, h[0:1], h[1:2], h[2:3])[0]
    return _gaussian_logpdf(np.array([next_value]), np.array([mean]), config)[0]


def _gaussian_logpdf(y: np.ndarray, mean: np.ndarray, config: BHConfig) -> np.ndarray:
    scale = config.noise_sigma / config.gross_rate
    z = (y - mean) / scale
    return -0.5 * z * z - math.log(scale) - 0.5 * math.log(2.0 * math.pi)


def bh_loglik(config: BHConfig, theta: ParameterVector, series: TimeSeries) -> float:
    """Sum of transition log-densities over t = 3..T-1, conditioned on the first three values."""
    if config.noise_sigma == 0.0:
        raise DegenerateDensityError("likelihood undefined for noise_sigma = 0")
    y = series.data[:, 0]
    if y.shape[0] < 4:
        raise ShapeError(f"series needs at least 4 values, got {y.shape[0]}")
    mean = _conditional_mean(config, theta, y[:-3], y[1:-2], y[2:-1])
    return float(_gaussian_logpdf(y[3:], mean, config).sum())
