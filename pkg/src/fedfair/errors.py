"""Exception types shared across the package.

All inherit from ValueError or RuntimeError so callers that only know the
standard exceptions still behave sensibly.
"""


class DimensionError(ValueError):
    """Array shapes do not line up (matrix dims, layer chaining, batch sizes)."""


class ValidationError(ValueError):
    """A config, dataset, or argument violates a documented invariant."""


class ParseError(ValueError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDivergedError(RuntimeError):
    """Local training produced a non-finite loss or gradient."""
