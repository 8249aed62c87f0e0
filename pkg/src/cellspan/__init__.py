"""Capacity-loss curve reconstruction and cycle-life prediction from early-cycle battery data."""

from .errors import CellspanError, DataError, NumericalError

__all__ = ["CellspanError", "DataError", "NumericalError"]
