"""Exception types shared across the package."""


class SparseVoxError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(SparseVoxError):
    """Tensor or array shapes are incompatible for the requested op."""


class ConfigError(SparseVoxError):
    """Invalid or inconsistent configuration."""


class NumericsError(SparseVoxError):
    """Numerically undefined request (NaN input, fully masked softmax row, ...)."""


class MissingGradientError(SparseVoxError):
    """An optimizer step was asked for a parameter that has no gradient."""


class CheckpointError(SparseVoxError):
    """Malformed checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version does not match the reader."""

    def __init__(self, found: int, expected: int):
        super().__init__(
            f"checkpoint format version {found} does not match reader version {expected}"
        )
        self.found = found
        self.expected = expected


class NotFittedError(SparseVoxError):
    """Estimator used before fit()."""


class SceneGenError(SparseVoxError):
    """Scene generation could not satisfy the spec (e.g. box rejection budget)."""
