"""Exception hierarchy. Each class carries the process exit code used by the CLI."""


class KDGANError(Exception):
    exit_code = 1


class ConfigError(KDGANError, ValueError):
    """Invalid specification or configuration value."""

    exit_code = 2


class ShapeError(ConfigError):
    """Tensor shapes incompatible with a model or loss."""


class DataError(KDGANError, ValueError):
    exit_code = 3


class MissingArtifactError(DataError):
    """A prerequisite file (dataset, checkpoint, manifest) is absent or corrupt."""


class ComparabilityError(KDGANError):
    """Runs or records that cannot be compared (e.g. different datasets)."""

    exit_code = 4


class NumericError(KDGANError, FloatingPointError):
    exit_code = 5


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


class SegmenterGateError(KDGANError):
    """The reference segmenter is not accurate enough to score generators."""

    exit_code = 6


class RunExistsError(KDGANError):
    exit_code = 7


class InvariantViolation(AssertionError):
    """Internal consistency check failed (gradient reached a frozen model)."""
