"""Exception hierarchy shared across the package."""


class MadetError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(MadetError):
    """Raised when a conv/pool geometry does not chain to integer sizes."""


class ShapeMismatchError(MadetError):
    """Raised when tensor shapes do not agree with the declared geometry."""


class NumericError(MadetError):
    """Raised when a computation produces non-finite values."""


class DataError(MadetError):
    """Raised for unreadable, inconsistent or corrupt data files."""


class ConfigError(MadetError):
    """Raised for invalid or unknown configuration entries."""
