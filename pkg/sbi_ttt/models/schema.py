from __future__ import annotations

import json
from pathlib import Path
from typing import TypeVar

from pydantic import BaseModel, ValidationError

from sbi_ttt.errors import ArtifactError, SchemaError

TModel = TypeVar("TModel", bound=BaseModel)


def strict_json_parse(content: str, schema: type[TModel]) -> TModel:
    """Parse JSON text into a pydantic schema with strict validation."""
    try:
        payload = json.loads(content)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"Invalid JSON document: {exc}") from exc

    try:
        return schema.model_validate(payload, strict=True)
    except ValidationError as exc:
        raise SchemaError(f"Schema validation failed: {exc}") from exc


def load_document(path: str | Path, schema: type[TModel]) -> TModel:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact: {path}")
    return strict_json_parse(path.read_text(encoding="utf-8"), schema)


def write_document(path: str | Path, document: BaseModel) -> Path:
    # json writes floats with repr, which round-trips float64 bit-exactly
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = document.model_dump()
    path.write_text(json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8")
    return path
