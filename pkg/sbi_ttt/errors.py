from __future__ import annotations

# typed errors shared by every subpackage; callers catch the narrowest class


class SBIError(Exception):
    """Base typed error for the package."""


class ConfigError(SBIError):
    """Invalid configuration value."""


class ShapeError(SBIError):
    """Array shape or dimension mismatch."""


class SimulationError(SBIError):
    """Simulator or likelihood failure."""


class CorruptedTrajectoryError(SimulationError):
    """Non-finite state reached the strategy-fraction map."""


class ExplosiveDynamicsError(SimulationError):
    """Trajectory left the divergence guard."""


class DegenerateDensityError(SimulationError):
    """Density undefined for the given configuration or data."""


class BackwardError(SBIError):
    """Backward pass requested without a recorded scalar loss."""


class NonFiniteGradientError(SBIError):
    """Gradient contains NaN or inf; the update is refused."""


class ProposalError(SBIError):
    """Proposal cannot produce draws inside the prior support."""


class TrainingError(SBIError):
    """Loss evaluation or optimisation failure."""


class RoundError(TrainingError):
    """Failure inside an SNPE round, annotated with the round index."""

    def __init__(self, round_index: int, cause: Exception):
        super().__init__(f"round {round_index}: {type(cause).__name__}: {cause}")
        self.round_index = round_index
        self.cause = cause


class AdapterError(SBIError):
    """Invalid LoRA adapter configuration or checkpoint mismatch."""


class SubspaceError(SBIError):
    """Gradient subspace cannot be formed."""


class SamplerError(SBIError):
    """Metropolis-Hastings cannot start or continue."""


class ConvergenceError(SamplerError):
    """Split-chain diagnostic above the acceptance threshold."""


class MetricError(SBIError):
    """Discrepancy metric undefined for the inputs."""


class ArtifactError(SBIError):
    """Missing, stale, or colliding artifact on disk."""


class SchemaError(ArtifactError):
    """Strict JSON or schema validation failure."""
