"""Exception types shared across the package."""


class Lor2cError(Exception):
    """Base class for all package errors."""


class DimensionError(Lor2cError, ValueError):
    pass


class RangeError(Lor2cError, IndexError):
    pass


class ContractError(Lor2cError, ValueError):
    pass


class NumericError(Lor2cError, ArithmeticError):
    pass


class LayoutError(Lor2cError, ValueError):
    pass


class ConfigError(Lor2cError, ValueError):
    pass
