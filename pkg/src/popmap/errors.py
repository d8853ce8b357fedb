"""Exception types shared across the package."""


class PopmapError(Exception):
    """Base class for all package errors."""


class ShapeError(PopmapError, ValueError):
    pass


class StateError(PopmapError, RuntimeError):
    """An object was used before it was ready (untrained model, missing stats)."""


class ConfigError(PopmapError, ValueError):
    pass


class PartitionError(PopmapError, ValueError):
    """A zone partition is malformed or not nested as required."""


class InputError(PopmapError, ValueError):
    pass


class TrainingError(PopmapError, RuntimeError):
    """Training diverged (non-finite loss)."""
