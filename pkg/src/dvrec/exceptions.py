"""Exception hierarchy shared across the package."""


class DVRError(Exception):
    """Base class for all package errors."""


class ConfigError(DVRError, ValueError):
    """Invalid configuration or argument value."""


class DataError(DVRError, ValueError):
    """Malformed or unusable interaction data."""


class FilterError(DataError):
    """Filtering removed every interaction."""


class CacheFormatError(DVRError):
    """A cache or checkpoint container failed validation."""


class StructureError(DVRError, ValueError):
    """Shapes of parameters, traces or batches do not agree."""


class ComplexityError(DVRError, ValueError):
    """An exact enumeration was requested over too many players."""


class NumericError(DVRError, FloatingPointError):
    """A loss, reward or parameter became non-finite."""
