from __future__ import annotations

import json
import logging
from typing import Any

import numpy as np

logger = logging.getLogger("sbi_ttt")


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def log_event(event: str, *, level: int = logging.INFO, **fields: Any) -> None:
    """Structured log line: one sorted-key JSON object per event."""
    if not logger.isEnabledFor(level):
        return
    payload = {"event": event, **{k: _jsonable(v) for k, v in fields.items()}}
    logger.log(level, json.dumps(payload, sort_keys=True))


def configure_logging(level: str = "INFO") -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(level.upper())
    logger.propagate = False
