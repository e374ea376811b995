"""Exception types shared across the package."""


class SvdAlignError(Exception):
    """Base class for package-specific failures."""


class NumericalFailure(SvdAlignError):
    """An iterative numerical routine failed to converge, or produced non-finite values."""


class UndefinedCosineError(ValueError):
    """Cosine similarity requested for a zero-norm operand."""


class ConfigError(SvdAlignError):
    """Run configuration file is missing, malformed, or fails schema validation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class CorruptCheckpointError(SvdAlignError):
    """Checkpoint file has a bad magic, version, or checksum."""


class DataFormatError(SvdAlignError):
    """Dataset file is missing, truncated, or malformed."""
