"""Exception hierarchy.

``ValidationError`` covers bad arguments, malformed configuration, and
stale pipeline inputs; ``NumericError`` covers failures of the numerical
machinery (singular matrices, violated stability bounds). The command
line maps them to exit codes 1 and 2 respectively.
"""


class SsgpError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SsgpError):
    """Invalid arguments, configuration, or input files."""


class NumericError(SsgpError):
    """Numerical failure such as a singular factorization or instability."""
