"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and
subclasses) -> 2, NumericError -> 3.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid configuration value or unknown config key."""


class DataError(PipelineError):
    """Input data violates a precondition (corpus layout, empty audio, ...)."""


class ShapeError(DataError):
    """Array dimensions do not match what an operation requires."""


class DecodeError(DataError):
    """An audio file could not be read or decoded."""


class CheckpointError(DataError):
    """A checkpoint file is missing, corrupt, or has the wrong version."""


class CompatibilityError(DataError):
    """Inputs were produced under a different configuration than required."""


class NumericError(PipelineError):
    """Non-finite values or numerically undefined results."""
