"""Exception types shared across the package."""


class CiderError(Exception):
    """Base class for all package errors."""


class ContractError(CiderError, ValueError):
    """A precondition or API contract was violated."""


class DimensionError(ContractError):
    """Operand shapes do not conform."""


class NumericError(CiderError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ParseError(CiderError, ValueError):
    """An input file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
