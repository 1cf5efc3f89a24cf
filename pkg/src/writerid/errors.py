"""Exception types shared across the package."""


class WriteridError(Exception):
    """Base class for all package errors."""


class ConfigError(WriteridError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ManifestError(WriteridError, ValueError):
    """Corpus manifest violates an invariant (duplicate id, missing file, imbalance)."""


class GradientStateError(WriteridError, RuntimeError):
    """Gradient-dependent operation called without a recorded forward/backward pass."""
