"""Exception types raised across the package."""


class UEGANError(Exception):
    pass


class DimensionError(UEGANError, ValueError):
    """Shapes of operands are incompatible."""


class NumericError(UEGANError, ArithmeticError):
    """A forward op or a loss produced NaN or Inf."""


class ContractError(UEGANError, RuntimeError):
    """An API was called outside its preconditions (e.g. backward on a non-scalar)."""


class ConfigError(UEGANError, ValueError):
    pass


class ParseError(UEGANError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
