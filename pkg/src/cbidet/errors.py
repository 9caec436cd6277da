"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class PreconditionError(ValueError):
    """An operation was called outside its stated preconditions."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (double backward, detached loss, ...)."""


class CorruptCheckpointError(RuntimeError):
    """Checkpoint file is truncated, has a bad magic, or fails validation."""


class DataError(ValueError):
    """Dataset file is malformed (bad label line, missing image, bad codec)."""
