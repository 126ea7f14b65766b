"""Exception hierarchy shared across the package."""


class DtrError(Exception):
    """Base class for all package errors."""


class DataError(DtrError):
    """Malformed or inconsistent input data."""


class ConfigError(DtrError):
    """Invalid run or simulation configuration."""


class ModelError(DtrError):
    """A model could not be fit or evaluated."""


class ConvergenceError(ModelError):
    """An iterative fit failed to converge."""


class SeparationError(ModelError):
    """Monotone likelihood: a coefficient diverges (nonidentifiable/separation)."""


class RankDeficiencyError(ModelError):
    """Design matrix is rank deficient; carries the offending term names."""

    def __init__(self, terms, message=None):
        self.terms = tuple(terms)
        super().__init__(message or f"rank-deficient design, collinear terms: {', '.join(self.terms)}")


class PositivityError(ModelError):
    """A weight denominator is (numerically) zero: positivity violation."""
