"""Exception types raised across the package."""

from __future__ import annotations


class CpodError(Exception):
    """Base class for all package errors."""


class DomainError(CpodError, ValueError):
    """A point or parameter lies outside the domain an operation accepts."""


class DegenerateMapError(CpodError, ValueError):
    """A rescale map would have a zero-length (or negative-length) region."""


class ParameterError(CpodError, ValueError):
    """A model parameter is outside its admissible set."""


class ConditioningError(CpodError, ArithmeticError):
    """A matrix factorization failed even after the jitter ladder.

    ``pair`` holds the indices of the two closest design points when the
    failing matrix is a design correlation matrix.
    """

    def __init__(self, message: str, pair: tuple[int, int] | None = None):
        super().__init__(message)
        self.pair = pair


class ConvergenceError(CpodError, ArithmeticError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class UndefinedMetricError(CpodError, ZeroDivisionError):
    """A metric has a zero denominator."""


class ValidationError(CpodError, ValueError):
    """Input files or manifests are malformed."""


class StageOrderError(CpodError, RuntimeError):
    """An upstream bundle no longer matches the checksum recorded downstream."""
