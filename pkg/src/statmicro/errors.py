"""Exception hierarchy shared across the package."""

from __future__ import annotations


class StatMicroError(Exception):
    """Base class for all package errors."""


class DomainError(StatMicroError, ValueError):
    """An argument lies outside the domain of the model (e.g. a non-positive price)."""


class UnsupportedConfigurationError(StatMicroError, ValueError):
    """The requested operation is only derived for a restricted parameter family."""


class ValidationError(StatMicroError, ValueError):
    """A parameter or config document failed validation.

    ``field`` names the offending key and ``line`` its 1-based line in the
    source document when it could be located.
    """

    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 source: str | None = None):
        self.field = field
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:"
            if line is not None:
                where += f"{line}:"
            where += " "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")


class ConvergenceError(StatMicroError, RuntimeError):
    """An iterative solver stopped without meeting its tolerance.

    ``last`` carries the final iterate, ``trace`` any residual history.
    """

    def __init__(self, message: str, last=None, trace=None):
        super().__init__(message)
        self.last = last
        self.trace = trace


class FitError(ConvergenceError):
    """Least-squares calibration did not converge."""


class IdentifiabilityError(StatMicroError, ValueError):
    """The data carry no information about the requested parameters."""


class TuningError(StatMicroError, RuntimeError):
    """Metropolis step-size tuning left the acceptance rate out of range."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LengthError(StatMicroError, ValueError):
    """Too few observations for the requested estimate."""


class LagRangeError(StatMicroError, IndexError):
    """A requested lag lies outside the available table."""
