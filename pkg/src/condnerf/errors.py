"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates the documented preconditions of an operation."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value.

    ``op`` names the operation (or operand) that produced it.
    """

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by {op!r}")


class FormatError(OSError):
    """A file on disk does not follow its declared format."""
