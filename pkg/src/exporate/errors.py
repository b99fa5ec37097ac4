"""Exception hierarchy shared by all modules."""


class ExpoRateError(Exception):
    """Base class for every error raised by exporate."""


class NegativeValue(ExpoRateError, ValueError):
    pass


class EmptyWindow(ExpoRateError, ValueError):
    """No usable index inside the requested estimation window."""


class SumOverflow(ExpoRateError, OverflowError):
    """A partial term or partial sum left the float64 range."""


class InvalidParams(ExpoRateError, ValueError):
    pass


class ResourceLimit(ExpoRateError, MemoryError):
    pass


class NonPositiveWealth(ExpoRateError, ValueError):
    pass


class ConfigError(ExpoRateError, ValueError):
    """Raised before any simulation when an experiment config is malformed."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
