"""Exception hierarchy shared by every sknet module."""


class SKNetError(Exception):
    """Base class for all errors raised by sknet."""


class ShapeError(SKNetError, ValueError):
    """Tensor shapes or channel counts do not agree."""


class ConfigError(SKNetError, ValueError):
    """An architecture, optimiser or dataset configuration is inconsistent."""


class NumericError(SKNetError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class TapeError(SKNetError, RuntimeError):
    """A gradient tape was misused (e.g. replayed twice without reset)."""


class DecodeError(SKNetError):
    """A dataset file does not follow the expected binary layout."""


class CheckpointError(SKNetError):
    """A checkpoint payload is truncated, from another version, or mismatched."""


class SelectorError(SKNetError, ValueError):
    """A unit selector matched nothing in the network."""


class TrainingDiverged(NumericError):
    """The training loss became non-finite."""
