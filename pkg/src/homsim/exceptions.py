"""Exception hierarchy used across the package."""


class HOMError(Exception):
    """Base class for all errors raised by homsim."""


class ConfigError(HOMError, ValueError):
    """Invalid configuration or parameter value.

    ``field`` names the offending field as a dotted path when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class InsufficientResolutionError(HOMError):
    """Time grid too coarse for the requested quadrature."""


class InsufficientStatisticsError(HOMError):
    """Not enough counts to form a ratio or estimate."""


class FitError(HOMError):
    """Fit could not be performed (unidentifiable or rejected model)."""
