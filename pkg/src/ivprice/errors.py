"""Exception types shared across the package."""


class IvpriceError(Exception):
    """Base class for package errors."""


class ConfigError(IvpriceError):
    """A configuration value is missing, malformed, or inconsistent."""


class DataError(IvpriceError):
    """An input file or dataset violates its documented format."""


class InvalidModel(IvpriceError):
    """A discrete structural model fails validation."""


class DegenerateSystem(IvpriceError):
    """The 2x2 identification system is numerically singular."""


class SingularWeighting(IvpriceError):
    """A conditional weighting matrix is singular beyond the ridge guard."""


class NonFiniteObjective(IvpriceError):
    """An optimization objective evaluated to NaN or infinity."""
