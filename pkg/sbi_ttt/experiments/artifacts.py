"""
On-disk layout of experiment artifacts.

    <root>/tasks/<task>/observation.csv       observed series y (+ observation.json)
    <root>/runs/<task>/<method>/seed-<s>/     one directory per command run
    <root>/references/<task>/<key>/           MH reference cache, keyed by stable hash
"""

from __future__ import annotations

import json
from hashlib import sha256
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict

from sbi_ttt.errors import ArtifactError
from sbi_ttt.events import log_event
from sbi_ttt.experiments.manifest import MANIFEST_NAME
from sbi_ttt.experiments.tasks import TaskSpec, observation_for
from sbi_ttt.models.schema import load_document, write_document
from sbi_ttt.simulation.datasets import read_samples, read_series, write_samples, write_series
from sbi_ttt.simulation.types import TimeSeries

OBSERVATION_SCHEMA_VERSION = 1
REFERENCE_SCHEMA_VERSION = 1


class ObservationRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    task: str
    seed: int
    ground_truth: list[float]


class ReferenceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    task: str
    key: str
    seed: int
    mh_config: dict[str, Any]
    rhat: list[float]
    acceptance: list[float]
    chain_seeds: list[int]
    n_pooled: int


def stable_key(payload: dict[str, Any]) -> str:
    """sha256 of the canonical JSON of `payload`; equal payloads give equal keys."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return sha256(canon.encode("utf-8")).hexdigest()


class ArtifactStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # --- runs ------------------------------------------------------------------------------

    def run_dir(self, task: str, method: str, seed: int) -> Path:
        return self.root / "runs" / task / method / f"seed-{seed}"

    def claim(self, out_dir: str | Path, overwrite: bool = False) -> Path:
        """Create `out_dir` for a new run; an existing manifest there is a seed collision."""
        out_dir = Path(out_dir)
        if (out_dir / MANIFEST_NAME).exists() and not overwrite:
            raise ArtifactError(
                f"{out_dir} already holds a run manifest (seed collision); pass --overwrite"
            )
        out_dir.mkdir(parents=True, exist_ok=True)
        return out_dir

    # --- observations ----------------------------------------------------------------------

    def observation_path(self, task: str) -> Path:
        return self.root / "tasks" / task / "observation.csv"

    def observation(self, task: TaskSpec, seed: int) -> TimeSeries:
        """The task's observed series, simulated on first use and reused afterwards."""
        path = self.observation_path(task.name)
        record_path = path.with_suffix(".json")
        if path.exists():
            record = load_document(record_path, ObservationRecord)
            if record.seed != seed:
                raise ArtifactError(
                    f"{path} was generated with observation seed {record.seed}, not {seed}"
                )
            return read_series(path, task.model_tag)
        y = observation_for(task, seed)
        write_series(path, y)
        write_document(
            record_path,
            ObservationRecord(
                schema_version=OBSERVATION_SCHEMA_VERSION,
                task=task.name,
                seed=seed,
                ground_truth=list(task.ground_truth),
            ),
        )
        return y

    # --- reference cache -------------------------------------------------------------------

    def reference_key(self, task: str, seed: int, mh_config: dict[str, Any]) -> str:
        return stable_key({"task": task, "seed": seed, "mh_config": mh_config})

    def reference_dir(self, task: str, key: str) -> Path:
        return self.root / "references" / task / key

    def get_reference(self, task: str, key: str) -> tuple[ReferenceRecord, np.ndarray] | None:
        directory = self.reference_dir(task, key)
        if not (directory / "reference.json").exists():
            return None
        record = load_document(directory / "reference.json", ReferenceRecord)
        if record.schema_version != REFERENCE_SCHEMA_VERSION or record.key != key:
            raise ArtifactError(f"stale reference cache entry in {directory}")
        log_event("reference.cache.hit", task=task, key=key)
        return record, read_samples(directory / "pooled.csv")

    def put_reference(self, record: ReferenceRecord, pooled: np.ndarray) -> Path:
        directory = self.reference_dir(record.task, record.key)
        write_samples(directory / "pooled.csv", pooled)
        write_document(directory / "reference.json", record)
        return directory
