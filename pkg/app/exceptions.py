class S2SError(Exception):
    """Base class for every contract violation raised by the package."""

    exit_code: int = 1


class ConfigError(S2SError, ValueError):
    exit_code = 2


class DataError(S2SError, ValueError):
    exit_code = 3


class ShapeMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class MissingDaysError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class MissingModelError(DataError):
    def __init__(self, lead: int, message: str = ""):
        self.lead = lead
        super().__init__(message or f"no model for lead K={lead}")


class DivergenceError(S2SError, ArithmeticError):
    exit_code = 4


class UndefinedMetricError(S2SError, ValueError):
    """A metric whose denominator vanishes (zero variance, |y| below the guard)."""

    exit_code = 3


class TaskFailedError(S2SError):
    """A worker task failed; carries the original error class name and exit code."""

    def __init__(self, error_type: str, exit_code: int, message: str):
        self.error_type = error_type
        self.exit_code = exit_code
        super().__init__(message)
