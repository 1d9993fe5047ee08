"""Exception types raised across the package."""


class MixsegError(Exception):
    """Base class for all package errors."""


class DimensionError(MixsegError, ValueError):
    """A tensor or array has the wrong shape along some axis."""


class ConfigError(MixsegError, ValueError):
    """Invalid configuration value or unsupported option."""


class LabelError(MixsegError, ValueError):
    """A class label lies outside ``[0, C)``."""


class DataError(MixsegError, ValueError):
    """Input data is empty or otherwise unusable."""


class ContractError(MixsegError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericError(MixsegError, ArithmeticError):
    """Training produced a non-finite value."""


class OracleError(MixsegError, RuntimeError):
    """The gradient oracle could not be evaluated reliably."""


class CheckpointFormatError(MixsegError, ValueError):
    """Checkpoint has a wrong magic string or unsupported version."""


class CheckpointCorruptError(MixsegError, ValueError):
    """Checkpoint payload is truncated or malformed."""


class ReportError(MixsegError, ValueError):
    """A report could not be produced from the supplied rows."""
