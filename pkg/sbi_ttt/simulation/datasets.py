from __future__ import annotations

from pathlib import Path

import numpy as np

from sbi_ttt.errors import ArtifactError, ShapeError
from sbi_ttt.simulation.types import ModelTag, TimeSeries

# columnar text: one header line, one row per record, 17 significant digits
_FMT = "%.17g"


def _write(path: Path, header: list[str], rows: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, fmt=_FMT, delimiter=",", header=",".join(header), comments="")


def _read(path: Path) -> tuple[list[str], np.ndarray]:
    if not path.exists():
        raise ArtifactError(f"missing columnar file: {path}")
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size and rows.shape[1] != len(header):
        raise ArtifactError(f"{path}: header has {len(header)} columns, rows have {rows.shape[1]}")
    return header, rows.reshape(-1, len(header))


def write_pairs(
    path: str | Path,
    thetas: np.ndarray,
    series: list[TimeSeries],
    seeds: np.ndarray,
    rounds: np.ndarray,
) -> None:
    """Persist (theta, x) pairs: `theta_0.., x_0..x_{T*dx-1}, seed, round`."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if len(series) != thetas.shape[0]:
        raise ShapeError("one series per parameter vector is required")
    xs = np.stack([s.data.ravel() for s in series]) if series else np.empty((0, 0))
    header = [f"theta_{i}" for i in range(thetas.shape[1])]
    header += [f"x_{i}" for i in range(xs.shape[1])] + ["seed", "round"]
    rows = np.column_stack([thetas, xs, np.asarray(seeds), np.asarray(rounds)])
    _write(Path(path), header, rows)


def read_pairs(
    path: str | Path, model_tag: ModelTag, x_dim: int
) -> tuple[np.ndarray, list[TimeSeries], np.ndarray, np.ndarray]:
    header, rows = _read(Path(path))
    n_theta = sum(1 for h in header if h.startswith("theta_"))
    n_x = sum(1 for h in header if h.startswith("x_"))
    thetas = rows[:, :n_theta]
    xs = rows[:, n_theta : n_theta + n_x]
    series = [TimeSeries(data=x.reshape(-1, x_dim), model_tag=model_tag) for x in xs]
    seeds = rows[:, n_theta + n_x].astype(np.int64)
    rounds = rows[:, n_theta + n_x + 1].astype(np.int64)
    return thetas, series, seeds, rounds


def write_samples(path: str | Path, samples: np.ndarray) -> None:
    """Posterior sample dump: `theta_0..`, one row per draw."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    _write(Path(path), [f"theta_{i}" for i in range(samples.shape[1])], samples)


def read_samples(path: str | Path) -> np.ndarray:
    header, rows = _read(Path(path))
    if not all(h.startswith("theta_") for h in header):
        raise ArtifactError(f"{path} is not a sample file")
    return rows


def write_series(path: str | Path, series: TimeSeries) -> None:
    _write(Path(path), [f"x_{i}" for i in range(series.dim)], series.data)


def read_series(path: str | Path, model_tag: ModelTag) -> TimeSeries:
    _, rows = _read(Path(path))
    return TimeSeries(data=rows, model_tag=model_tag)
