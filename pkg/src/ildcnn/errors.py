"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2 and numeric failures exit 3.
"""


class IldError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(IldError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(IldError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(IldError):
    """Input data is missing, malformed or insufficient."""


class NumericError(IldError, ArithmeticError):
    """A non-finite value appeared in a computation."""


class CheckpointError(DataError):
    """Base class for checkpoint decoding failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
