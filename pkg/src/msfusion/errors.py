"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class FusionError(Exception):
    exit_code = 1


class ConfigError(FusionError, ValueError):
    """Bad shapes, out-of-range hyperparameters, malformed configuration."""

    exit_code = 2


class DataError(FusionError, ValueError):
    """Inputs that are well-formed but unusable (empty mask, single class...)."""

    exit_code = 3


class FormatError(DataError):
    """Corrupt or truncated binary file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(FusionError, ArithmeticError):
    """NaN/Inf produced during a forward or backward pass."""

    exit_code = 4
