"""Self-supervised audio representations from single clips, on a numpy autodiff core."""
from .errors import (ByolaError, ContractViolation, DataError, FormatError, NumericError,
                     TooShortError, UninitializedStatsError, VersionError)

__version__ = "0.1.0"

__all__ = [
    "ByolaError", "ContractViolation", "DataError", "FormatError", "NumericError",
    "TooShortError", "UninitializedStatsError", "VersionError", "__version__",
]
