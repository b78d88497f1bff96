"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class ByolaError(Exception):
    """Base class for all library errors."""


class ContractViolation(ByolaError, ValueError):
    """An operation was called with arguments outside its contract."""


class UninitializedStatsError(ContractViolation):
    """BatchNorm evaluated before any running statistics were collected."""


class DataError(ByolaError):
    """Input data could not be read or is unusable."""


class FormatError(DataError):
    """Malformed or unsupported file contents."""


class TooShortError(DataError):
    """Audio clip shorter than one analysis window."""


class VersionError(DataError):
    """Checkpoint or container written by an incompatible version."""


class NumericError(ByolaError, FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""
