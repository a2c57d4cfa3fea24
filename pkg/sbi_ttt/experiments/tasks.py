"""Registry of the benchmark tasks: simulator, prior, ground truth and pretraining source."""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from sbi_ttt.errors import ConfigError
from sbi_ttt.inference.reference import LogLik
from sbi_ttt.simulation.brock_hommes import BHConfig, bh_loglik, simulate_bh
from sbi_ttt.simulation.mvgbm import MVGBMConfig, mvgbm_loglik, simulate_mvgbm
from sbi_ttt.simulation.priors import BoxUniformPrior
from sbi_ttt.simulation.types import ModelTag, Simulator, TimeSeries

# observations are simulated at seed + offset so they never share a stream with training data
OBSERVATION_SEED_OFFSET = 1_000_003

BH_PRIOR = BoxUniformPrior(lower=(0.0, 0.0, 0.0, -1.0), upper=(1.0, 1.0, 1.0, 0.0))
DRIFT_PRIOR = BoxUniformPrior(lower=(-1.0, -1.0, -1.0), upper=(1.0, 1.0, 1.0))

BH_PARAMETERS = ("g2", "b2", "g3", "b3")
DRIFT_PARAMETERS = ("b1", "b2", "b3")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    model_tag: ModelTag
    simulator_config: BHConfig | MVGBMConfig
    prior: BoxUniformPrior
    ground_truth: tuple[float, ...]
    parameter_names: tuple[str, ...]
    pretrain_source: str | None = None

    def __post_init__(self) -> None:
        if len(self.ground_truth) != self.prior.dim or len(self.parameter_names) != self.prior.dim:
            raise ConfigError(f"task {self.name}: ground truth and prior dimensions differ")
        if not self.prior.contains(np.asarray(self.ground_truth)):
            raise ConfigError(f"task {self.name}: ground truth lies outside the prior")

    @property
    def theta_dim(self) -> int:
        return self.prior.dim

    @property
    def feature_dim(self) -> int:
        config = self.simulator_config
        if isinstance(config, MVGBMConfig):
            return config.horizon * config.dim
        return config.horizon

    def simulator(self) -> Simulator:
        # a partial over a module-level function pickles, so process pools can run it
        if isinstance(self.simulator_config, MVGBMConfig):
            return partial(simulate_mvgbm, self.simulator_config)
        return partial(simulate_bh, self.simulator_config)

    def loglik(self, y: TimeSeries) -> LogLik:
        config = self.simulator_config
        if isinstance(config, MVGBMConfig):
            return lambda theta: mvgbm_loglik(config, theta, y)
        return lambda theta: bh_loglik(config, theta, y)


def builtin_tasks() -> list[TaskSpec]:
    bh_truth = (0.9, 0.2, 0.9, -0.2)
    mvgbm = MVGBMConfig()
    return [
        TaskSpec(
            "bh_beta120", ModelTag.BH, BHConfig(beta=120.0), BH_PRIOR, bh_truth, BH_PARAMETERS
        ),
        TaskSpec(
            "bh_beta60",
            ModelTag.BH,
            BHConfig(beta=60.0),
            BH_PRIOR,
            bh_truth,
            BH_PARAMETERS,
            pretrain_source="bh_beta120",
        ),
        TaskSpec(
            "bh_beta60gtc",
            ModelTag.BH,
            BHConfig(beta=60.0),
            BH_PRIOR,
            (0.6, 0.4, 0.7, -0.3),
            BH_PARAMETERS,
            pretrain_source="bh_beta120",
        ),
        TaskSpec("mvgbm", ModelTag.MVGBM, mvgbm, DRIFT_PRIOR, (0.2, -0.5, -0.1), DRIFT_PARAMETERS),
        TaskSpec(
            "mvgbmgtc",
            ModelTag.MVGBM,
            mvgbm,
            DRIFT_PRIOR,
            (0.6, -0.5, -0.2),
            DRIFT_PARAMETERS,
            pretrain_source="mvgbm",
        ),
    ]


def get_task(name: str) -> TaskSpec:
    for task in builtin_tasks():
        if task.name == name:
            return task
    known = ", ".join(t.name for t in builtin_tasks())
    raise ConfigError(f"unknown task {name!r}; known tasks: {known}")


def observation_for(task: TaskSpec, seed: int) -> TimeSeries:
    """The observed series y: one simulation at the ground truth."""
    theta = np.asarray(task.ground_truth, dtype=np.float64)
    return task.simulator()(theta, seed + OBSERVATION_SEED_OFFSET)
