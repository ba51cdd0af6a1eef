"""Exception hierarchy shared by every mopsa module.

The CLI maps these onto process exit codes: ConfigError -> 2,
MissingArtifactError -> 3, NumericError -> 4, anything else -> 1.
"""


class MopsaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MopsaError):
    """Operand shapes are incompatible; the message names both shapes."""


class InputTooShortError(MopsaError):
    """A temporal input is too short for the requested operation."""


class CapacityError(MopsaError):
    """A configured budget (positions, vocabulary, ...) would be exceeded."""


class ContractError(MopsaError):
    """A documented precondition of an operation was violated."""


class EmptyLossError(ContractError):
    """Every position of a loss was masked out."""


class ConfigError(MopsaError):
    """Invalid, inconsistent, or mismatched configuration."""


class CorruptionError(MopsaError):
    """A stored artifact is missing, truncated, or fails its hash check."""


class NumericError(MopsaError):
    """Training or adaptation produced non-finite values."""


class MissingArtifactError(MopsaError):
    """An upstream pipeline stage has not produced its artifact yet."""
