"""Exception taxonomy shared across the package.

Every error raised by library code derives from SteinCvError so callers can
catch one base class; the CLI maps subclasses onto exit codes.
"""


class SteinCvError(Exception):
    """Base class for all errors raised by this package."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class InvalidInput(SteinCvError):
    """Malformed or inconsistent arguments (shapes, non-finite values, ...)."""


class InsufficientSamples(SteinCvError):
    """Too few samples for the requested operation (e.g. N < 2, N < folds)."""


class DomainError(SteinCvError):
    """A value lies outside the domain of a transform or density."""


class BasisTooLarge(SteinCvError):
    """The requested polynomial basis exceeds the row cap."""


class ConvergenceError(SteinCvError):
    """An iterative solver reached its iteration budget without converging."""


class ConditioningError(SteinCvError):
    """A linear system stayed numerically singular after regularisation."""


class DegenerateWeights(SteinCvError):
    """All importance weights vanished (every log weight is -inf)."""


class InvalidSchedule(SteinCvError):
    """A temperature schedule violates its ordering/endpoint contract."""
