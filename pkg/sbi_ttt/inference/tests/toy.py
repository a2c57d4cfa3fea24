"""Conjugate toy problem x = theta + shift + noise * eps, one observation per coordinate."""

from functools import partial

import numpy as np

from sbi_ttt.models.flow import ConditionalFlow, FlowConfig
from sbi_ttt.simulation.priors import BoxUniformPrior
from sbi_ttt.simulation.types import ModelTag, TimeSeries

NOISE = 0.5


def gaussian_simulator(theta, seed, shift=0.0, noise=NOISE):
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    eps = np.random.default_rng(seed).standard_normal(theta.shape[0])
    return TimeSeries(data=(theta + shift + noise * eps)[None, :], model_tag=ModelTag.BH)


def shifted_simulator(shift):
    return partial(gaussian_simulator, shift=shift)


def box(dim, half_width=3.0):
    return BoxUniformPrior(lower=(-half_width,) * dim, upper=(half_width,) * dim)


def small_flow(theta_dim=1, seed=0, hidden=16, embed=4, n_layers=2):
    config = FlowConfig(
        theta_dim=theta_dim,
        feature_dim=theta_dim,
        n_layers=n_layers,
        hidden_sizes=(hidden,),
        embed_dim=embed,
        embed_hidden=(hidden,),
    )
    return ConditionalFlow.build(config, seed=seed)


def observation(values):
    data = np.atleast_1d(np.asarray(values, dtype=np.float64))[None, :]
    return TimeSeries(data=data, model_tag=ModelTag.BH)
