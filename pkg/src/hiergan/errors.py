"""Exception types shared across the package."""


class DatasetError(OSError):
    """Raised when a dataset directory or manifest is missing or corrupt."""


class CheckpointError(OSError):
    """Raised when a checkpoint container cannot be read or fails validation."""


class ConfigError(ValueError):
    """Raised when a run config contains unknown keys or invalid values."""


class NumericError(ArithmeticError):
    """Raised when a computation encounters non-finite values."""
