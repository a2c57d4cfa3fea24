"""
Experiment configuration.

Resolution order is defaults, then a flat `key = value` config file, then `--set`
overrides on the command line. Values are JSON literals where they parse as one
(`5e-4`, `[500, 500]`, `null`) and bare strings otherwise.
"""

from __future__ import annotations

import json
import os
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, ValidationError

from sbi_ttt.errors import ConfigError
from sbi_ttt.experiments.tasks import TaskSpec
from sbi_ttt.inference.reference import MHConfig
from sbi_ttt.inference.snpe import RoundSchedule, TrainConfig
from sbi_ttt.inference.subspace import SubspaceSpec
from sbi_ttt.models.flow import FlowConfig
from sbi_ttt.models.lora import LoRASpec

ARTIFACT_ROOT_ENV = "SBI_TTT_ARTIFACT_ROOT"
DEFAULT_ARTIFACT_ROOT = "artifacts"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # SNPE schedule and optimiser
    sims_per_round: list[int] = [500, 500, 500, 1000]
    lr: float = 5e-4
    batch_size: int = 100
    max_epochs: int = 500
    patience: int = 20
    val_fraction: float = 0.1
    atoms: int = 10
    atom_weighting: Literal["proposal", "prior"] = "proposal"

    # flow architecture
    flow_layers: int = 5
    flow_hidden: list[int] = [64, 64]
    embed_dim: int = 32
    embed_hidden: list[int] = [64]

    # adaptation
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_init_sigma: float = 0.01
    subspace_rank: int | None = 8
    subspace_energy: float | None = None
    snapshot_batches: int = 32
    snapshot_batch_size: int = 32

    # reference sampler
    mh_samples: int = 20_000
    mh_burn_in: int = 10_000
    mh_thin: int = 5
    mh_chains: int = 4
    mh_step_fraction: float = 0.05
    rhat_threshold: float = 1.05
    require_converged: bool = True

    # evaluation and execution
    eval_samples: int = 1000
    observation_seed: int = 0
    workers: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            val_fraction=self.val_fraction,
            atoms=self.atoms,
            atom_weighting=self.atom_weighting,
        )

    def schedule(self) -> RoundSchedule:
        return RoundSchedule(tuple(self.sims_per_round), self.train_config())

    def flow_config(self, task: TaskSpec) -> FlowConfig:
        return FlowConfig(
            theta_dim=task.theta_dim,
            feature_dim=task.feature_dim,
            n_layers=self.flow_layers,
            hidden_sizes=tuple(self.flow_hidden),
            embed_dim=self.embed_dim,
            embed_hidden=tuple(self.embed_hidden),
        )

    def lora_spec(self) -> LoRASpec:
        return LoRASpec(rank=self.lora_rank, alpha=self.lora_alpha, init_sigma=self.lora_init_sigma)

    def subspace_spec(self) -> SubspaceSpec:
        # an energy threshold replaces the fixed rank when given
        rank = None if self.subspace_energy is not None else self.subspace_rank
        return SubspaceSpec(
            rank=rank,
            energy=self.subspace_energy,
            n_batches=self.snapshot_batches,
            batch_size=self.snapshot_batch_size,
        )

    def mh_config(self) -> MHConfig:
        return MHConfig(
            n_samples=self.mh_samples,
            burn_in=self.mh_burn_in,
            thin=self.mh_thin,
            step_fraction=self.mh_step_fraction,
            n_chains=self.mh_chains,
            rhat_threshold=self.rhat_threshold,
        )


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_assignments(lines: Iterable[str], source: str) -> dict[str, Any]:
    """`key = value` lines; blank lines and `#` comments are skipped."""
    values: dict[str, Any] = {}
    for number, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, raw = text.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{number}: expected `key = value`, got {line.strip()!r}")
        values[key.strip()] = _parse_value(raw.strip())
    return values


def build_config(*layers: Mapping[str, Any]) -> ExperimentConfig:
    merged: dict[str, Any] = {}
    for layer in layers:
        unknown = sorted(set(layer) - set(ExperimentConfig.model_fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(layer)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    return parse_assignments(path.read_text(encoding="utf-8").splitlines(), str(path))


def resolve_config(
    config_file: str | Path | None = None, overrides: Iterable[str] = ()
) -> ExperimentConfig:
    file_values = load_config_file(config_file) if config_file is not None else {}
    return build_config(file_values, parse_assignments(overrides, "--set"))


def artifact_root(explicit: str | None = None) -> Path:
    return Path(explicit or os.environ.get(ARTIFACT_ROOT_ENV) or DEFAULT_ARTIFACT_ROOT)
