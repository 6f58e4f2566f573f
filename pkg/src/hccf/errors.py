"""Exception types shared across the package."""


class HCCFError(Exception):
    """Base class for all package errors."""


class DimensionError(HCCFError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HCCFError, ValueError):
    """A documented precondition was violated."""


class ConfigError(HCCFError, ValueError):
    """Invalid configuration key or value."""


class DataError(HCCFError, ValueError):
    """Malformed or unusable input data."""


class EmptyDatasetError(DataError):
    pass


class IntegrityError(HCCFError):
    """A checkpoint on disk does not match its manifest."""


class NumericError(HCCFError, FloatingPointError):
    """Training produced a non-finite value."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
