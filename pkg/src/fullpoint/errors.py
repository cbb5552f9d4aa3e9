"""Exception types shared across the package."""


class FullPointError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FullPointError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FullPointError, ValueError):
    """A precondition of an operation was violated."""


class ParameterError(FullPointError, ValueError):
    """A scalar or configuration parameter is out of range."""


class NumericError(FullPointError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ParseError(FullPointError, ValueError):
    """A cloud file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(FullPointError, ValueError):
    """A cloud file is well formed but lacks required columns."""


class SpecError(FullPointError, ValueError):
    """A declarative network or training spec failed validation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid spec: " + "; ".join(self.problems))
