"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InvalidMaskError(ValueError):
    """A mask selects no position where at least one is required."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class VocabularyError(IndexError):
    """A token index lies outside the vocabulary."""


class ParseError(ValueError):
    """Malformed input file. ``location`` is a line number or byte offset."""

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
        self.location = location


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""
