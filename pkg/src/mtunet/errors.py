"""Exception hierarchy shared by every mtunet module."""


class MtunetError(Exception):
    """Base class for all package errors."""


class DimensionError(MtunetError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(MtunetError, ValueError):
    """An operation was called with arguments it cannot honour."""


class NonFiniteError(MtunetError, ArithmeticError):
    """A NaN or Inf appeared in a tensor."""


class LoadError(MtunetError, IOError):
    """A persisted file (tensor, checkpoint, dataset index) is malformed."""


class ParseError(UsageError):
    """A config file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
