from .batch import derive_seeds, simulate_batch
from .brock_hommes import (
    BHConfig,
    bh_loglik,
    bh_strategy_fractions,
    bh_transition_logpdf,
    simulate_bh,
)
from .mvgbm import MVGBMConfig, mvgbm_loglik, simulate_mvgbm
from .priors import BoxUniformPrior, prior_logpdf, prior_sample
from .types import ModelTag, ParameterVector, Simulator, TimeSeries

__all__ = [
    "BHConfig",
    "BoxUniformPrior",
    "MVGBMConfig",
    "ModelTag",
    "ParameterVector",
    "Simulator",
    "TimeSeries",
    "bh_loglik",
    "bh_strategy_fractions",
    "bh_transition_logpdf",
    "derive_seeds",
    "mvgbm_loglik",
    "prior_logpdf",
    "prior_sample",
    "simulate_batch",
    "simulate_bh",
    "simulate_mvgbm",
]
