from __future__ import annotations

from datetime import datetime, timezone
from hashlib import sha256
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict

from sbi_ttt.errors import ArtifactError
from sbi_ttt.models.schema import load_document, write_document

UTC = timezone.utc  # datetime.UTC alias (3.11+)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

Command = Literal["pretrain", "finetune", "reference", "evaluate"]


class ExperimentManifest(BaseModel):
    """Everything needed to re-run one command: arguments, resolved config, seeds, outputs."""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = MANIFEST_SCHEMA_VERSION
    command: Command
    task: str
    method: str | None = None
    seed: int
    arguments: dict[str, Any]
    config: dict[str, Any]
    seeds: dict[str, int]
    inputs: dict[str, str] = {}
    outputs: dict[str, str] = {}
    digests: dict[str, str] = {}
    metrics: dict[str, float] = {}
    dims: dict[str, int] = {}
    wall_seconds: float
    created_at: str


def utc_timestamp() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def file_digest(path: str | Path) -> str:
    return sha256(Path(path).read_bytes()).hexdigest()


def save_manifest(manifest: ExperimentManifest, out_dir: str | Path) -> Path:
    return write_document(Path(out_dir) / MANIFEST_NAME, manifest)


def load_manifest(path: str | Path) -> ExperimentManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = load_document(path, ExperimentManifest)
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION:
        raise ArtifactError(
            f"{path}: manifest schema {manifest.schema_version} != {MANIFEST_SCHEMA_VERSION}"
        )
    return manifest
