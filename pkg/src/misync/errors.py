"""Exception hierarchy.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`NumericalError`
to exit code 3.
"""


class MisyncError(Exception):
    """Base class for all package errors."""


class ConfigError(MisyncError, ValueError):
    """Invalid parameters, unknown config keys, unresolvable state labels."""


class StructuralError(MisyncError, ValueError):
    """Shape or dimension mismatch between operands."""


class ContractViolation(MisyncError, ValueError):
    """An input does not satisfy a documented precondition."""


class NumericalError(MisyncError, ArithmeticError):
    """Integration or linear-algebra failure."""


class StepSizeError(NumericalError):
    """The integrator left its region of validity; retry with a smaller dt."""

    def __init__(self, message, time=None):
        if time is not None:
            message = f"{message} (t = {time:.6g})"
        super().__init__(message)
        self.time = time


class InsufficientDataError(MisyncError, ValueError):
    """A time series is too short for the requested analysis."""


class UnsupportedModeError(MisyncError, ValueError):
    """A subspace supports several Bohr frequencies where one is required."""
