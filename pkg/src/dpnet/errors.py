"""Exception hierarchy shared by every dpnet module."""


class DPNetError(Exception):
    """Base class for all dpnet errors."""


class ShapeError(DPNetError, ValueError):
    pass


class DegenerateBatchError(ShapeError):
    pass


class NumericError(DPNetError, ArithmeticError):
    pass


class UsageError(DPNetError, RuntimeError):
    pass


class OracleInvalidError(DPNetError, RuntimeError):
    pass


class ConfigError(DPNetError, ValueError):
    pass


class CheckpointError(DPNetError, ValueError):
    pass


class DataError(DPNetError, ValueError):
    pass


class ResourceGuardError(DPNetError, RuntimeError):
    pass
