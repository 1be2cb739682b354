"""Exception hierarchy shared across the package."""


class SurpriseNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SurpriseNetError, ValueError):
    pass


class NonFiniteError(SurpriseNetError, FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeConsumedError(SurpriseNetError, RuntimeError):
    pass


class TaskStateError(SurpriseNetError, RuntimeError):
    """Operation is not valid for the registry's current task state."""


class CapacityExhaustedError(SurpriseNetError, RuntimeError):
    """A layer has no FREE weights left for a new task."""


class DivergenceError(SurpriseNetError, RuntimeError):
    """Training produced a non-finite loss."""


class DataFormatError(SurpriseNetError, ValueError):
    pass


class ConfigError(SurpriseNetError, ValueError):
    pass
