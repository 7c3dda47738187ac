"""Exception types shared across the package."""


class SchemaError(ValueError):
    """A tabular file or config does not match its declared schema."""


class ParseError(ValueError):
    """A value could not be parsed; carries the offending row/line number."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class UndefinedAUCError(ValueError):
    """AUC requested with no positive or no negative samples."""


class ShapeError(ValueError):
    pass


class DegeneratePairError(ValueError):
    """A group pair has no positive or no negative member in the batch."""


class NumericError(FloatingPointError):
    """Non-finite value met during forward/backward or Lagrangian evaluation."""


class InvariantViolation(RuntimeError):
    """A training invariant (lambda >= 0, feasible pair distribution) broke."""
