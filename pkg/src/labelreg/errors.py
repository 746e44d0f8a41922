"""Exception hierarchy shared by every module."""


class LabelRegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LabelRegError, ValueError):
    """Invalid configuration: bad shapes, presets, keys or hyperparameters."""


class DataError(LabelRegError, ValueError):
    """Malformed or out-of-range data (label ids, files, headers)."""


class UsageError(LabelRegError, RuntimeError):
    """API used out of contract (e.g. backward on a loss not on the tape)."""


class EmptyLossSupportError(LabelRegError, ValueError):
    """Every pixel/element is void or masked so the loss has no support."""


class TrainingError(LabelRegError, RuntimeError):
    """Numerical failure during training, such as a NaN loss."""
