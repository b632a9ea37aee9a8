class TNError(Exception):
    """Base class for errors raised by tnml."""


class StructuralError(TNError):
    """A label, node or edge is missing, duplicated or wired inconsistently."""


class DimensionError(TNError):
    """Two axes that must share an extent do not."""


class InvalidSelectionError(TNError):
    """A node selection violates a constraint (e.g. copy-initialising the output node)."""


class FormatError(TNError):
    """A file on disk does not match the expected layout."""


class DivergenceError(TNError):
    """Training produced non-finite or collapsed values.

    ``record`` carries whatever metrics were collected before the failure.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class RangeError(TNError, ArithmeticError):
    """A requested variance cannot be represented as a double."""
