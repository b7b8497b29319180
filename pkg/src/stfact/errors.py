"""Exception types shared across the package."""


class DataError(ValueError):
    """Raised for malformed input files, shape mismatches, or bad masks."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""
