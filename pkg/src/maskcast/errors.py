"""Exception types shared across the package."""


class DataError(ValueError):
    """Raised for malformed, incomplete or inconsistent input data."""


class ConfigError(ValueError):
    """Raised when an experiment or model configuration is invalid."""


class TrainingError(RuntimeError):
    """Raised when optimisation diverges (non-finite loss)."""
