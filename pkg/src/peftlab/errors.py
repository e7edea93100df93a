"""Exception types raised across the package."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    pass


class NumericError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
