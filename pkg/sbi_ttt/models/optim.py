from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sbi_ttt.errors import ConfigError, NonFiniteGradientError, ShapeError
from sbi_ttt.models.store import FlowParameterStore


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(m=np.zeros(size), v=np.zeros(size))

    @property
    def size(self) -> int:
        return int(self.m.shape[0])


def adam_update(
    values: np.ndarray, grad: np.ndarray, state: AdamState, config: AdamConfig
) -> None:
    """In-place Adam step on a flat vector; the optimiser only ever sees flat vectors."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != values.shape or grad.shape[0] != state.size:
        raise ShapeError(f"gradient {grad.shape} does not match parameters {values.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NonFiniteGradientError(f"non-finite gradient at coordinate {bad}; step refused")

    state.step += 1
    state.m *= config.beta1
    state.m += (1.0 - config.beta1) * grad
    state.v *= config.beta2
    state.v += (1.0 - config.beta2) * grad * grad
    m_hat = state.m / (1.0 - config.beta1**state.step)
    v_hat = state.v / (1.0 - config.beta2**state.step)
    values -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)


def sgd_adam_step(
    store: FlowParameterStore, grad: np.ndarray, state: AdamState, config: AdamConfig
) -> FlowParameterStore:
    adam_update(store.flat, grad, state, config)
    return store
