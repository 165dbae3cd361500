"""Exception types shared across the package."""


class KenkfError(Exception):
    """Base class for all package errors."""


class ConfigurationError(KenkfError, ValueError):
    """Inconsistent dimensions, bad parameters or an invalid config file."""


class UnsupportedOperation(KenkfError, TypeError):
    """Operation not defined for the given kind of forward model."""


class NumericDivergence(KenkfError, ArithmeticError):
    """Non-finite state encountered during a run.

    The partial trace accumulated before the failure is kept on ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class NotCovered(KenkfError):
    """Initial condition outside the branch a closed-form solution covers."""
