from .adapt import (
    AdaptResult,
    finetune_full,
    finetune_gradsubspace_pea,
    finetune_gradsubspace_ttt,
    finetune_lora,
)
from .metrics import MetricReport, median_heuristic, mmd_squared, wasserstein
from .reference import MHConfig, run_mh, run_reference, split_rhat
from .snpe import (
    Dataset,
    Proposal,
    RoundSchedule,
    SNPEResult,
    TrainConfig,
    run_snpe,
    snpe_loss,
    train_round,
)
from .subspace import (
    GradSubspace,
    SubspaceSpec,
    collect_gradient_snapshots,
    compute_subspace,
    project_gradient,
)

__all__ = [
    "AdaptResult",
    "Dataset",
    "GradSubspace",
    "MHConfig",
    "MetricReport",
    "Proposal",
    "RoundSchedule",
    "SNPEResult",
    "SubspaceSpec",
    "TrainConfig",
    "collect_gradient_snapshots",
    "compute_subspace",
    "finetune_full",
    "finetune_gradsubspace_pea",
    "finetune_gradsubspace_ttt",
    "finetune_lora",
    "median_heuristic",
    "mmd_squared",
    "project_gradient",
    "run_mh",
    "run_reference",
    "run_snpe",
    "snpe_loss",
    "split_rhat",
    "train_round",
    "wasserstein",
]
