"""Exception hierarchy shared by every module."""


class RslError(Exception):
    """Base class for all errors raised by rslkit."""


class SchemaError(RslError):
    """Input file is missing a declared column or metadata."""


class ParseError(RslError):
    """A cell could not be parsed; carries the 1-based data row number."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ValidationError(RslError):
    """Values violate a data-model invariant."""

    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = tuple(rows)


class ConfigurationError(RslError):
    """Model or kernel configured inconsistently with its inputs."""


class NumericError(RslError):
    """Linear algebra failed (e.g. Cholesky after jitter escalation)."""


class OptimizationError(RslError):
    """No start point produced a finite objective."""


class DivergenceError(RslError):
    """MCMC proposals stayed non-finite for too long."""


class SizeError(RslError):
    """Problem size exceeds a configured computational cap."""


class UnderdeterminedError(RslError):
    """Too few observations to identify the requested parameters."""

    def __init__(self, message, steps=()):
        super().__init__(message)
        self.steps = tuple(steps)


class SmootherInstabilityError(NumericError):
    """Backward smoothing pass became numerically unstable."""

    def __init__(self, message, step_range=None):
        super().__init__(message)
        self.step_range = step_range


class DegeneracyError(RslError):
    """A statistic is undefined for the given input (zero variance, no weight)."""


class InsufficientDataError(RslError):
    """Fewer observations than an operation needs."""
