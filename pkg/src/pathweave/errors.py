"""Exception taxonomy shared across the package."""


class PathWeaveError(Exception):
    """Base class for all package errors."""


class ShapeError(PathWeaveError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(PathWeaveError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(PathWeaveError):
    """NaN or Inf surfaced where only finite values are allowed."""


class ConfigError(PathWeaveError):
    """Configuration failed schema validation."""


class GenerationError(PathWeaveError):
    """Synthetic benchmark generation could not satisfy its constraints."""


class TrainingDivergedError(PathWeaveError):
    """Training loss became non-finite; the stage was aborted."""


class IncompleteMatrixError(PathWeaveError):
    """A score-matrix entry required by a metric is missing."""


class CheckpointError(PathWeaveError):
    """Checkpoint file is malformed, corrupt, or inconsistent with the config."""
