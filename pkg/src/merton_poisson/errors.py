"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`MertonPoissonError`
so the CLI can map domain failures to exit status 1.
"""

from __future__ import annotations


class MertonPoissonError(Exception):
    """Base class for domain errors."""


class NotPositiveDefinite(MertonPoissonError):
    pass


class DomainError(MertonPoissonError, ValueError):
    pass


class InsufficientPoints(MertonPoissonError):
    pass


class ZeroObligors(MertonPoissonError):
    pass


class DegenerateAlpha(MertonPoissonError):
    pass


class ConstantSeries(MertonPoissonError):
    pass


class FitFailure(MertonPoissonError):
    pass


class NonConvergence(MertonPoissonError):
    """Optimizer or sampler did not converge.

    ``diagnostics`` carries whatever the failing routine had at hand
    (optimizer message, R-hat values, partial draws ...).
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InsufficientDraws(MertonPoissonError):
    pass


class InsufficientSamples(MertonPoissonError):
    pass


class ParseError(MertonPoissonError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class SchemaViolation(MertonPoissonError):
    pass


class EmptyDataset(MertonPoissonError):
    pass
