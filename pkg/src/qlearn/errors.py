"""Exception types raised across the package."""


class QLearnError(Exception):
    """Base class for all package errors."""


class NonFiniteError(QLearnError, ValueError):
    """An input or intermediate value was NaN or infinite."""


class InsufficientDataError(QLearnError, ValueError):
    """Too few samples for a statistical test to be meaningful."""


class ScheduleOverflowError(QLearnError, OverflowError):
    """The resolution exponent would exceed the configured maximum."""


class ScheduleViolationError(QLearnError, RuntimeError):
    """A resolution bound was violated under strict enforcement."""


class ConfigError(QLearnError, ValueError):
    """An experiment config failed validation."""


class DimensionError(QLearnError, ValueError):
    pass
