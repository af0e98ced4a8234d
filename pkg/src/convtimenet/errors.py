class CtnError(Exception):
    """Base class for engine errors."""


class DimensionError(CtnError, ValueError):
    pass


class EmptyInputError(CtnError, ValueError):
    pass


class NumericError(CtnError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DataFormatError(CtnError, ValueError):
    pass


class CheckpointError(CtnError, ValueError):
    pass


class ConfigError(CtnError, ValueError):
    pass
