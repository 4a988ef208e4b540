"""Exception hierarchy.

Everything raised deliberately by the package derives from
:class:`SpdShrinkError`, so callers (and the CLI) can separate input and
numerical failures from programming errors.
"""

from __future__ import annotations

__all__ = [
    "SpdShrinkError",
    "NotSpdError",
    "DimMismatchError",
    "EmptyInputError",
    "BadLengthError",
    "ExpOverflowError",
    "BadDofError",
    "BadProbError",
    "TooFewSamplesError",
    "BadNError",
    "SingularScatterError",
    "OptFailedError",
    "SingularPooledError",
    "IrlsDivergedError",
    "DegenerateSupportError",
    "BadMagicError",
    "CorruptRecordError",
    "ConfigError",
]


class SpdShrinkError(Exception):
    """Base class for all package errors."""


class NotSpdError(SpdShrinkError, ValueError):
    """A matrix failed the symmetric positive-definite check."""


class DimMismatchError(SpdShrinkError, ValueError):
    pass


class EmptyInputError(SpdShrinkError, ValueError):
    pass


class BadLengthError(SpdShrinkError, ValueError):
    """Vector length is not a triangular number N(N+1)/2."""


class ExpOverflowError(SpdShrinkError, ArithmeticError):
    """Eigenvalue of a matrix-exponential argument exceeds the cap."""


class BadDofError(SpdShrinkError, ValueError):
    pass


class BadProbError(SpdShrinkError, ValueError):
    pass


class TooFewSamplesError(SpdShrinkError, ValueError):
    pass


class BadNError(SpdShrinkError, ValueError):
    """Per-site sample size too small for the requested formula."""


class SingularScatterError(SpdShrinkError, ValueError):
    pass


class OptFailedError(SpdShrinkError, RuntimeError):
    """The optimizer stopped without meeting its gradient tolerance.

    The best iterate found is attached as ``best``.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class SingularPooledError(SpdShrinkError, ValueError):
    pass


class IrlsDivergedError(SpdShrinkError, RuntimeError):
    pass


class DegenerateSupportError(SpdShrinkError, ValueError):
    pass


class BadMagicError(SpdShrinkError, ValueError):
    pass


class CorruptRecordError(SpdShrinkError, ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ConfigError(SpdShrinkError, ValueError):
    pass
