"""Exception hierarchy shared by every module of the package."""


class HomogError(Exception):
    """Base class for all package errors."""


class DomainError(HomogError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class OutOfRangeError(HomogError, ValueError):
    """A query fell outside a tabulated range or a bisection bracket."""


class UsageError(HomogError, ValueError):
    """An operation was called with an invalid configuration."""


class ConvergenceError(HomogError, RuntimeError):
    """A nonlinear or nested solve failed to reach its tolerance.

    Attributes:
        residual: last residual norm reached.
        trace: residual norm history of the failed solve.
        where: optional description of the offending parameters.
    """

    def __init__(self, message, residual=float("nan"), trace=(), where=None):
        super().__init__(message)
        self.residual = residual
        self.trace = list(trace)
        self.where = where


class HypothesisError(HomogError):
    """A sampled structural hypothesis on a flux did not hold."""
