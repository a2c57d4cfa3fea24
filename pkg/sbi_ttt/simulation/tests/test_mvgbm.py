import math

import numpy as np
import pytest

from sbi_ttt.errors import ConfigError, DegenerateDensityError
from sbi_ttt.simulation.mvgbm import MVGBMConfig, mvgbm_loglik, simulate_mvgbm
from sbi_ttt.simulation.types import ModelTag, TimeSeries

THETA = np.array([0.2, -0.5, -0.1])


def _lognormal_loglik(config, theta, x):
    """Independent transcription of the multivariate log-normal transition density."""
    cov = config.covariance
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    gamma = 0.5 * np.sum(np.asarray(config.sigma) ** 2, axis=1)
    total = 0.0
    for t in range(1, x.shape[0]):
        r = np.log(x[t]) - np.log(x[t - 1]) - (theta - gamma) * config.dt
        d = x.shape[1]
        total += -0.5 * (r @ inv @ r) - 0.5 * logdet - 0.5 * d * math.log(2 * math.pi)
        total -= np.log(x[t]).sum()
    return total


def test_defaults_follow_observation_grid():
    config = MVGBMConfig()
    assert config.dt == pytest.approx(1 / 99)
    assert config.x0 == (1.0, 1.0, 1.0)
    assert config.gamma == pytest.approx([0.5 * 0.26, 0.5 * 0.10, 0.5 * 0.04])


def test_invalid_configs_are_rejected():
    with pytest.raises(ConfigError):
        MVGBMConfig(dt=-1.0)
    with pytest.raises(ConfigError):
        MVGBMConfig(x0=(1.0, 0.0, 1.0))


def test_zero_volatility_gives_exponential_path():
    config = MVGBMConfig(sigma=((0.0, 0.0), (0.0, 0.0)), horizon=20, x0=(1.0, 2.0))
    theta = np.array([0.3, -0.7])
    series = simulate_mvgbm(config, theta, seed=1)
    t = np.arange(20)[:, None] * config.dt
    assert series.data == pytest.approx(np.array([1.0, 2.0]) * np.exp(theta * t), rel=1e-12)


def test_output_is_exp_of_reconstructed_random_walk():
    config = MVGBMConfig()
    series = simulate_mvgbm(config, THETA, seed=4)
    z = np.random.default_rng(4).standard_normal((99, 3))
    steps = (THETA - config.gamma) * config.dt + z @ config.sigma_matrix.T * math.sqrt(config.dt)
    walk = np.vstack([np.zeros(3), np.cumsum(steps, axis=0)])
    assert np.array_equal(series.data, np.exp(walk))
    assert series.model_tag is ModelTag.MVGBM
    assert np.all(series.data > 0.0)


def test_log_increment_moments_match_transition():
    n = 100_000
    config = MVGBMConfig(horizon=n + 1, dt=0.01)
    series = simulate_mvgbm(config, THETA, seed=8)
    inc = np.diff(np.log(series.data), axis=0)
    cov = config.covariance
    mean_se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(inc.mean(axis=0) - (THETA - config.gamma) * config.dt) < 3 * mean_se)
    emp_cov = np.cov(inc, rowvar=False)
    cov_se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
    assert np.all(np.abs(emp_cov - cov) < 3 * cov_se + 1e-15)


def test_single_step_loglik_closed_form():
    config = MVGBMConfig(sigma=((1.0,),), horizon=2, dt=1.0, x0=(1.0,))
    series = TimeSeries(data=np.array([[1.0], [1.0]]), model_tag=ModelTag.MVGBM)
    theta = config.gamma
    assert mvgbm_loglik(config, theta, series) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_loglik_matches_independent_density():
    config = MVGBMConfig()
    series = simulate_mvgbm(config, THETA, seed=21)
    theta = np.array([0.4, -0.2, 0.3])
    expected = _lognormal_loglik(config, theta, series.data)
    assert mvgbm_loglik(config, theta, series) == pytest.approx(expected, rel=1e-10)


def test_loglik_is_additive_over_split():
    config = MVGBMConfig()
    series = simulate_mvgbm(config, THETA, seed=2)
    head = TimeSeries(data=series.data[:41], model_tag=ModelTag.MVGBM)
    tail = TimeSeries(data=series.data[40:], model_tag=ModelTag.MVGBM)
    total = mvgbm_loglik(config, THETA, series)
    parts = mvgbm_loglik(config, THETA, head) + mvgbm_loglik(config, THETA, tail)
    assert total == pytest.approx(parts, rel=1e-12)


def test_loglik_rejects_non_positive_values():
    config = MVGBMConfig(sigma=((0.5,),), x0=(1.0,))
    series = TimeSeries(data=np.array([[1.0], [-0.5]]), model_tag=ModelTag.BH)
    with pytest.raises(DegenerateDensityError):
        mvgbm_loglik(config, np.array([0.1]), series)
