"""Exception hierarchy shared by every sherl module."""

from __future__ import annotations


class SherlError(Exception):
    """Base class for all library errors."""


class DimensionError(SherlError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(SherlError, ValueError):
    """A configuration value is missing, malformed or inconsistent."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = ""
        if line is not None:
            where += f"line {line}: "
        if field is not None:
            where += f"{field}: "
        super().__init__(where + message)
        self.field = field
        self.line = line


class ContractError(SherlError, RuntimeError):
    """A documented precondition of an operation was violated."""


class NumericError(SherlError, ArithmeticError):
    """A computation produced non-finite values."""


class NumericDivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at optimizer step {step}")
        self.step = step
        self.loss = loss


class AuditError(SherlError, AssertionError):
    """The gradient-flow audit found a frozen tensor with a gradient."""
