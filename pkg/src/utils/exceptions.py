"""
Custom exceptions for the SIU3R field engine.
"""


class SIU3RException(Exception):
    """Base exception for engine errors."""
    pass


class ConfigurationException(SIU3RException):
    """Exception raised for configuration errors."""
    pass


class BundleFormatException(SIU3RException):
    """
    Exception raised for scene bundle format errors.

    Carries a machine-readable code so callers can tell a truncated blob
    from a bad magic or a missing tensor.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class DimensionMismatchException(SIU3RException):
    """Exception raised when tensor shapes disagree."""
    pass


class NonFiniteException(SIU3RException):
    """Exception raised for NaN inputs or non-finite objective values."""
    pass


class RasterException(SIU3RException):
    """Exception raised for internal rasterizer errors (non-SPD covariances)."""
    pass


class AttributeBudgetException(SIU3RException):
    """Exception raised when an attribute payload exceeds the configured budget."""
    pass


class UnknownInstanceException(SIU3RException):
    """Exception raised for instance or query ids that are not present."""
    pass


class InvalidTransformException(SIU3RException):
    """Exception raised for non-rigid transforms or malformed edit operations."""
    pass


class MissingChannelException(SIU3RException):
    """Exception raised when a requested metric lacks its ground-truth channel."""
    pass
