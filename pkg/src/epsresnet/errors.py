"""Exception types shared across the package."""


class EpsResNetError(Exception):
    """Base class for all package errors."""


class ShapeError(EpsResNetError):
    """An operation received tensors with inconsistent shapes."""


class NumericFaultError(EpsResNetError):
    """A forward value or gradient became NaN or infinite."""


class StateError(EpsResNetError):
    """An operation was called in an invalid order (e.g. backward before forward)."""


class ConfigError(EpsResNetError):
    """A run configuration is invalid or contains unknown keys."""


class CheckpointError(EpsResNetError):
    """A checkpoint file is malformed, truncated, or of the wrong version."""


class PruneError(EpsResNetError):
    """A structural-pruning request was refused."""
