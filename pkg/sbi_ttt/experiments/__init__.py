from .artifacts import ArtifactStore
from .config import ExperimentConfig, build_config, resolve_config
from .manifest import ExperimentManifest, load_manifest
from .tasks import TaskSpec, builtin_tasks, get_task

__all__ = [
    "ArtifactStore",
    "ExperimentConfig",
    "ExperimentManifest",
    "TaskSpec",
    "build_config",
    "builtin_tasks",
    "get_task",
    "load_manifest",
    "resolve_config",
]
