"""Exception types shared across the package."""


class GhnqError(Exception):
    """Base class for all package errors."""


class ShapeError(GhnqError):
    """Tensor shapes incompatible with the requested operation."""


class GraphError(GhnqError):
    """Architecture graph violates a structural invariant."""


class GraphFormatError(GhnqError):
    """Malformed graph file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConstraintInfeasibleError(GhnqError):
    """Sampling rejected too many consecutive draws for the configured space."""


class QuantError(GhnqError):
    """Invalid quantization configuration or inputs."""


class HypernetError(GhnqError):
    """Hypernetwork cannot process the given graph or configuration."""


class CheckpointError(GhnqError):
    """Checkpoint file is missing, corrupt, or has a mismatched version."""


class TrainingDivergedError(GhnqError):
    """Loss became non-finite during finetuning."""


class ConfigError(GhnqError):
    """Run configuration file is invalid."""


class DatasetError(GhnqError):
    """Dataset files missing or malformed."""
