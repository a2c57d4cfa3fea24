from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from sbi_ttt.errors import ConfigError, ConvergenceError, SamplerError, SimulationError
from sbi_ttt.events import log_event
from sbi_ttt.simulation.batch import derive_seeds
from sbi_ttt.simulation.priors import BoxUniformPrior

LogLik = Callable[[np.ndarray], float]

MAX_INIT_ATTEMPTS = 1000


@dataclass(frozen=True)
class MHConfig:
    n_samples: int = 20_000  # post burn-in iterations, before thinning
    burn_in: int = 10_000
    thin: int = 5
    step_scales: tuple[float, ...] | None = None  # None = step_fraction of each box width
    step_fraction: float = 0.05
    adapt_burnin: bool = True
    target_accept: float = 0.234
    n_chains: int = 4
    rhat_threshold: float = 1.05

    def __post_init__(self) -> None:
        if self.n_samples < 0 or self.burn_in < 0:
            raise ConfigError("n_samples and burn_in must be non-negative")
        if self.thin < 1 or self.n_chains < 1:
            raise ConfigError("thin and n_chains must be at least 1")
        if self.step_scales is not None and any(s <= 0 for s in self.step_scales):
            raise ConfigError("step scales must be positive")
        if self.step_fraction <= 0:
            raise ConfigError("step_fraction must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)")

    def initial_scales(self, prior: BoxUniformPrior) -> np.ndarray:
        if self.step_scales is None:
            return self.step_fraction * prior.widths
        scales = np.asarray(self.step_scales, dtype=np.float64)
        if scales.shape != (prior.dim,):
            raise ConfigError(f"expected {prior.dim} step scales, got {scales.shape[0]}")
        return scales


@dataclass
class ChainResult:
    samples: np.ndarray
    acceptance: float
    step_scales: np.ndarray


def _safe_loglik(loglik: LogLik, theta: np.ndarray) -> float:
    try:
        value = float(loglik(theta))
    except SimulationError:
        return -np.inf
    return value if np.isfinite(value) else -np.inf


def run_mh(
    loglik: LogLik,
    prior: BoxUniformPrior,
    init: np.ndarray,
    config: MHConfig,
    seed: int,
) -> ChainResult:
    """
    Gaussian random-walk Metropolis-Hastings on loglik + prior log-density.

    During burn-in a global multiplier on the step scales follows a Robbins-Monro
    recursion toward `target_accept`; it is frozen afterwards. Proposals outside the
    prior box are rejected without evaluating the likelihood. The acceptance rate reported
    is over the post burn-in iterations.
    """
    current = np.asarray(init, dtype=np.float64).copy()
    if not prior.contains(current):
        raise SamplerError(f"initial point {current.tolist()} lies outside the prior box")
    current_ll = float(loglik(current))
    if not np.isfinite(current_ll):
        raise SamplerError(f"log-likelihood at the initial point is {current_ll}")

    rng = np.random.default_rng(seed)
    scales = config.initial_scales(prior)
    log_multiplier = 0.0
    kept: list[np.ndarray] = []
    accepted_post = 0
    total = config.burn_in + config.n_samples

    for it in range(total):
        step = scales * np.exp(log_multiplier)
        proposal = current + step * rng.standard_normal(prior.dim)
        log_u = np.log(rng.random())
        accept_prob = 0.0
        if prior.contains(proposal):
            proposal_ll = _safe_loglik(loglik, proposal)
            # uniform prior: the prior ratio is 1 inside the box
            log_alpha = proposal_ll - current_ll
            accept_prob = float(np.exp(min(0.0, log_alpha)))
            if log_u < log_alpha:
                current, current_ll = proposal, proposal_ll
                if it >= config.burn_in:
                    accepted_post += 1
        if it < config.burn_in and config.adapt_burnin:
            log_multiplier += (accept_prob - config.target_accept) / (it + 1) ** 0.6
        elif it >= config.burn_in and (it - config.burn_in) % config.thin == config.thin - 1:
            kept.append(current.copy())

    final_scales = scales * np.exp(log_multiplier)
    acceptance = accepted_post / config.n_samples if config.n_samples else float("nan")
    log_event("mh.chain", seed=seed, acceptance=acceptance, step_scales=final_scales)
    samples = np.array(kept) if kept else np.empty((0, prior.dim))
    return ChainResult(samples=samples, acceptance=acceptance, step_scales=final_scales)


def split_rhat(chains: Sequence[np.ndarray]) -> np.ndarray:
    """Split-chain potential scale reduction per coordinate."""
    halves = []
    for chain in chains:
        chain = np.asarray(chain, dtype=np.float64)
        if chain.ndim == 1:
            chain = chain[:, None]
        half = chain.shape[0] // 2
        if half < 2:
            raise SamplerError("chains are too short for a split R-hat")
        halves.extend([chain[:half], chain[half : 2 * half]])
    stacked = np.stack(halves)  # (m, n, d)
    n = stacked.shape[1]
    within = stacked.var(axis=1, ddof=1).mean(axis=0)
    between = n * stacked.mean(axis=1).var(axis=0, ddof=1)
    pooled = (n - 1) / n * within + between / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(pooled / within)
    return np.where(within > 0, rhat, np.inf)


@dataclass
class ReferenceResult:
    samples: np.ndarray
    chains: list[ChainResult]
    rhat: np.ndarray
    seeds: list[int]
    rhat_threshold: float = 1.05

    @property
    def acceptance(self) -> list[float]:
        return [c.acceptance for c in self.chains]

    @property
    def converged(self) -> bool:
        return bool(np.all(self.rhat < self.rhat_threshold))


def initial_points(
    loglik: LogLik, prior: BoxUniformPrior, n: int, seed: int
) -> list[np.ndarray]:
    """Prior draws with a finite log-likelihood, one per chain."""
    draws = prior.sample(MAX_INIT_ATTEMPTS, seed)
    points = [d for d in draws if np.isfinite(_safe_loglik(loglik, d))][:n]
    if len(points) < n:
        raise SamplerError("could not find initial points with a finite log-likelihood")
    return points


def run_reference(
    loglik: LogLik,
    prior: BoxUniformPrior,
    config: MHConfig,
    seed: int,
    init: np.ndarray | None = None,
    require_converged: bool = True,
) -> ReferenceResult:
    """Independent chains concatenated into one reference sample, gated on split R-hat."""
    seeds = [int(s) for s in derive_seeds(seed, config.n_chains + 1)]
    if init is None:
        inits = initial_points(loglik, prior, config.n_chains, seeds[-1])
    else:
        inits = [np.asarray(init, dtype=np.float64)] * config.n_chains
    chains = [run_mh(loglik, prior, x0, config, s) for x0, s in zip(inits, seeds, strict=False)]
    rhat = split_rhat([c.samples for c in chains])
    log_event("mh.rhat", rhat=rhat, threshold=config.rhat_threshold)
    if require_converged and np.any(rhat >= config.rhat_threshold):
        raise ConvergenceError(f"split R-hat {rhat.tolist()} >= {config.rhat_threshold}")
    return ReferenceResult(
        samples=np.concatenate([c.samples for c in chains]),
        chains=chains,
        rhat=rhat,
        seeds=seeds[: config.n_chains],
        rhat_threshold=config.rhat_threshold,
    )
