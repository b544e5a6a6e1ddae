"""Recurrence-risk modeling toolkit.

Discrete-time survival learning on bagged tile features, CAPRA-S scoring,
censored-survival statistics, cohort splitting, slide tiling geometry and
occlusion / attention interpretability.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BcrError,
    DataError,
    DegenerateBinsError,
    NoValidSpacingError,
    NumericalError,
    SingularMatrixError,
    UndefinedCIndexError,
)
