"""Summary tables, CSV and pairplot-ready histogram data; rendering is left to plotting tools."""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from sbi_ttt.experiments.manifest import ExperimentManifest
from sbi_ttt.experiments.tasks import TaskSpec
from sbi_ttt.models.schema import write_document

METHOD_ORDER = ("snpe", "ttt", "lora", "gs-ttt", "gs-pea")
METHOD_LABELS = {
    "snpe": "SNPE",
    "ttt": "SNPE-TTT",
    "lora": "SNPE-LoRA",
    "gs-ttt": "GradSubspace-TTT",
    "gs-pea": "GradSubspace-PEA",
}
HISTOGRAM_SCHEMA_VERSION = 1
DEFAULT_BINS = 30


class ReportRow(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    task: str
    method: str
    wass: float
    mmd_sq: float
    n_seeds: int


def _method_rank(method: str) -> tuple[int, str]:
    return (METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER), method)


def summarize(manifests: Sequence[ExperimentManifest]) -> list[ReportRow]:
    """One row per (task, method): metrics averaged over the evaluated seeds."""
    groups: dict[tuple[str, str], list[ExperimentManifest]] = defaultdict(list)
    for manifest in manifests:
        if manifest.command == "evaluate" and manifest.method is not None:
            groups[(manifest.task, manifest.method)].append(manifest)
    rows = [
        ReportRow(
            task=task,
            method=method,
            wass=float(np.mean([m.metrics["wass"] for m in group])),
            mmd_sq=float(np.mean([m.metrics["mmd_sq"] for m in group])),
            n_seeds=len(group),
        )
        for (task, method), group in groups.items()
    ]
    return sorted(rows, key=lambda r: (r.task, _method_rank(r.method)))


def format_table(rows: Sequence[ReportRow]) -> str:
    lines = [f"{'Task':<14} {'Method':<18} {'WASS':>8} {'MMD':>8}"]
    current = None
    for row in rows:
        task = row.task if row.task != current else ""
        current = row.task
        label = METHOD_LABELS.get(row.method, row.method)
        lines.append(f"{task:<14} {label:<18} {row.wass:>8.4f} {row.mmd_sq:>8.4f}")
    return "\n".join(lines) + "\n"


def format_csv(rows: Sequence[ReportRow]) -> str:
    lines = ["task,method,wass,mmd_sq"]
    lines += [f"{r.task},{r.method},{r.wass!r},{r.mmd_sq!r}" for r in rows]
    return "\n".join(lines) + "\n"


class MarginalHistogram(BaseModel):
    model_config = ConfigDict(extra="forbid")

    parameter: str
    edges: list[float]
    density: list[float]
    ground_truth: float


class PairHistogram(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x: str
    y: str
    x_edges: list[float]
    y_edges: list[float]
    density: list[list[float]]


class PairplotData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = HISTOGRAM_SCHEMA_VERSION
    task: str
    method: str
    n_samples: int
    marginals: list[MarginalHistogram]
    pairs: list[PairHistogram]


def pairplot_data(
    task: TaskSpec, method: str, samples: np.ndarray, bins: int = DEFAULT_BINS
) -> PairplotData:
    """Density histograms on the prior box: every marginal plus every lower-triangle pair."""
    lows, highs = task.prior.lows, task.prior.highs
    edges = [np.linspace(lows[i], highs[i], bins + 1) for i in range(task.theta_dim)]
    names = task.parameter_names
    marginals = []
    for i in range(task.theta_dim):
        density, _ = np.histogram(samples[:, i], bins=edges[i], density=True)
        marginals.append(
            MarginalHistogram(
                parameter=names[i],
                edges=edges[i].tolist(),
                density=np.nan_to_num(density).tolist(),
                ground_truth=task.ground_truth[i],
            )
        )
    pairs = []
    for i in range(task.theta_dim):
        for j in range(i):
            density, _, _ = np.histogram2d(
                samples[:, j], samples[:, i], bins=[edges[j], edges[i]], density=True
            )
            pairs.append(
                PairHistogram(
                    x=names[j],
                    y=names[i],
                    x_edges=edges[j].tolist(),
                    y_edges=edges[i].tolist(),
                    density=np.nan_to_num(density).tolist(),
                )
            )
    return PairplotData(
        task=task.name,
        method=method,
        n_samples=int(samples.shape[0]),
        marginals=marginals,
        pairs=pairs,
    )


def write_report(rows: Sequence[ReportRow], out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "table.txt"
    table.write_text(format_table(rows), encoding="utf-8")
    csv = out_dir / "metrics.csv"
    csv.write_text(format_csv(rows), encoding="utf-8")
    return {"table": table, "csv": csv}


def write_pairplot(data: PairplotData, out_dir: str | Path, seed: int) -> Path:
    return write_document(Path(out_dir) / f"hist-{data.task}-{data.method}-seed-{seed}.json", data)
