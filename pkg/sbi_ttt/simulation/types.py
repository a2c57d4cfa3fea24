from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import numpy as np

from sbi_ttt.errors import ShapeError, SimulationError

# a point theta in the ABM parameter space is a plain float64 vector
ParameterVector = np.ndarray


class ModelTag(str, Enum):
    BH = "BH"
    MVGBM = "MVGBM"


@dataclass(frozen=True)
class TimeSeries:
    """Simulated or observed trajectory, T steps x d_x dims."""

    data: np.ndarray
    model_tag: ModelTag

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise ShapeError(f"TimeSeries data must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise SimulationError("TimeSeries contains non-finite entries")
        if self.model_tag is ModelTag.MVGBM and np.any(data <= 0.0):
            raise SimulationError("MVGBM TimeSeries must be strictly positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def horizon(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def features(self) -> np.ndarray:
        """Flat feature vector fed to the embedding network.

        MVGBM is a positive multiplicative process, so it is featurised on the log scale.
        """
        if self.model_tag is ModelTag.MVGBM:
            return np.log(self.data).ravel()
        return self.data.ravel().copy()


class Simulator(Protocol):
    """A simulator is a pure function of (theta, seed)."""

    def __call__(self, theta: ParameterVector, seed: int) -> TimeSeries: ...


def as_parameter_vector(theta: object, dim: int) -> ParameterVector:
    values = np.asarray(theta, dtype=np.float64).reshape(-1)
    if values.shape[0] != dim:
        raise ShapeError(f"expected parameter vector of length {dim}, got {values.shape[0]}")
    return values
