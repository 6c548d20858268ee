"""State-space Gaussian process emulation and calibration."""

__version__ = "0.1.0"

from .errors import NumericError, SsgpError, ValidationError

__all__ = ["NumericError", "SsgpError", "ValidationError", "__version__"]
