"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes (2 config, 3 divergence, 4 I/O).
"""


class LabError(Exception):
    """Base class for all package errors."""


class DimensionError(LabError, ValueError):
    pass


class DegenerateInputError(LabError, ValueError):
    pass


class ParameterError(LabError, ValueError):
    pass


class EmptySetError(LabError, ValueError):
    pass


class ProtocolError(LabError, RuntimeError):
    pass


class NumericError(LabError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message="non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class UndefinedQueryError(LabError, ValueError):
    """A retrieval query has no positive in the gallery."""
