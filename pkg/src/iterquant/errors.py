"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: FormatError -> 2, ValidationError
(and subclasses) -> 3, NumericalError -> 4.
"""


class IterquantError(Exception):
    """Base class for all toolkit errors."""


class FormatError(IterquantError):
    """Malformed or truncated file content (bad magic, version, payload)."""


class ValidationError(IterquantError):
    """Invalid arguments or violated invariants."""


class DimensionError(ValidationError):
    """Shape or length mismatch between operands."""


class DegenerateInputError(ValidationError):
    """Input with no usable content, e.g. a fully masked vector."""


class NumericalError(IterquantError):
    """Non-finite values encountered during computation."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = context or {}
