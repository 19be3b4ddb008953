"""Exception hierarchy shared by the pipeline stages."""

from __future__ import annotations


class CalfplayError(ValueError):
    """Base class for user/input errors (maps to CLI exit code 2)."""


class SchemaError(CalfplayError):
    """A delimited input is missing a required column."""

    def __init__(self, column: str, source: str = "<stream>") -> None:
        self.column = column
        self.source = source
        super().__init__(f"{source}: missing required column {column!r}")


class RowError(CalfplayError):
    """A single data row could not be parsed or validated."""

    def __init__(self, message: str, source: str = "<stream>", row: int | None = None) -> None:
        self.source = source
        self.row = row
        self.message = message
        where = source if row is None else f"{source}, row {row}"
        super().__init__(f"{where}: {message}")


class PairingError(CalfplayError):
    """A StateStop event has no open StateStart."""


class ClassificationError(CalfplayError):
    """Behaviour code absent from the ethogram table."""


class TimestampError(CalfplayError):
    """Filename or timestamp text does not match the expected pattern."""


class EmbeddingFormatError(CalfplayError):
    """Embedding file has the wrong size or header."""


class EmbeddingDataError(CalfplayError):
    """Embedding file contains non-finite values."""


class LmmError(CalfplayError):
    """Mixed-model inputs or fit are degenerate."""


class StageError(CalfplayError):
    """A pipeline stage is missing an upstream artifact."""
