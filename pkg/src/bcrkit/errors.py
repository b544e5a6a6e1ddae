"""Exception hierarchy.

The CLI maps :class:`DataError` to exit code 2 and :class:`NumericalError`
to exit code 3.
"""


class BcrError(Exception):
    """Base class for all toolkit errors."""


class DataError(BcrError, ValueError):
    """Malformed, missing or inconsistent input data."""


class NumericalError(BcrError, ArithmeticError):
    """A computation could not produce a finite, well-defined result."""


class DegenerateBinsError(DataError):
    pass


class UndefinedCIndexError(NumericalError):
    """No permissible pair exists, so the concordance index is undefined."""


class SingularMatrixError(NumericalError):
    def __init__(self, message, covariate=None):
        super().__init__(message)
        self.covariate = covariate


class NoValidSpacingError(DataError):
    pass
