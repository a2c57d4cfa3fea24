from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from sbi_ttt.simulation.types import Simulator, TimeSeries


def derive_seeds(seed: int, n: int) -> np.ndarray:
    """Independent per-simulation seeds from one root seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return np.array([int(c.generate_state(1)[0]) for c in children], dtype=np.int64)


def simulate_batch(
    simulator: Simulator, thetas: np.ndarray, seeds: np.ndarray, workers: int = 1
) -> list[TimeSeries]:
    """
    Run the simulator over (theta, seed) pairs.

    Each call only depends on its own seed, so a process pool gives the same result as the
    serial loop; `simulator` must then be picklable (a functools.partial over a module-level
    function is).
    """
    thetas = np.atleast_2d(thetas)
    if workers <= 1:
        return [simulator(theta, int(s)) for theta, s in zip(thetas, seeds, strict=True)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(simulator, list(thetas), [int(s) for s in seeds]))
