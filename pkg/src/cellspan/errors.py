"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class CellspanError(Exception):
    """Base class for all library errors."""


class DataError(CellspanError, ValueError):
    """Malformed input, violated record invariant, or missing data."""


class NumericalError(CellspanError, ArithmeticError):
    """Singular system, non-finite intermediate, or divergent training."""
