"""Exception hierarchy shared by all lrwi modules."""


class LrwiError(Exception):
    """Base class for lrwi errors."""

    exit_code = 1


class DomainError(LrwiError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ShapeError(LrwiError, ValueError):
    """Array or grid dimensions do not agree."""


class ConfigError(LrwiError, ValueError):
    exit_code = 2


class SizeError(LrwiError, ValueError):
    """Problem too large for a dense or diagnostic-only routine."""

    # the configured grid is the problem, so the CLI treats it as input error
    exit_code = 2


class SingularityError(LrwiError, ArithmeticError):
    """A matrix is (numerically) singular.

    ``pivot`` is the index of the offending pivot when known, ``context``
    carries free-form diagnostics such as the (source, frequency) pair or the
    penalty weights in use.
    """

    def __init__(self, message, pivot=None, context=None):
        super().__init__(message)
        self.pivot = pivot
        self.context = dict(context or {})

    def __str__(self):
        msg = super().__str__()
        if self.pivot is not None:
            msg += f" (pivot {self.pivot})"
        if self.context:
            extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
            msg += f" [{extra}]"
        return msg


class ProjectionError(SingularityError):
    """Normal-equation residual of a projected wavefield is above tolerance."""
