"""Exception hierarchy shared by every scrl-st module.

The CLI maps these onto exit codes (config → 2, data → 3, numeric → 4), so
new failure modes should subclass the closest existing category rather than
``Exception`` directly.
"""

from pathlib import Path


class ScrlError(Exception):
    """Base class for all scrl-st errors."""


class ConfigError(ScrlError, ValueError):
    """A configuration value or combination of values is invalid."""


class DataError(ScrlError):
    """Input data on disk is malformed or inconsistent."""


class FormatError(DataError):
    """A binary matrix file does not carry the expected header."""


class TruncationError(DataError):
    """A binary matrix file ends before its declared payload."""


class SchemaError(DataError):
    """Dataset files disagree with each other (row counts, headers, ids)."""


class DimensionError(ScrlError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class BudgetError(ScrlError):
    """A sampling budget cannot be met by the candidate set."""


class NumericError(ScrlError):
    """A computation produced a non-finite value."""


class StateError(ScrlError):
    """An object was used before it reached the required state."""


class MatrixWriteError(ScrlError, OSError):
    """Writing a matrix (or another artifact) to disk failed."""

    def __init__(self, message: str, path: str | Path):
        super().__init__(message)
        self.path = str(path)
