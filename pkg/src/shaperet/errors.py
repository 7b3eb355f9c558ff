"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ParameterError -> 2 (usage),
FormatError / FingerprintError -> 3 (data), NumericError -> 4 (numeric abort).
"""


class ShapeRetError(Exception):
    """Base class for all package errors."""


class ParameterError(ShapeRetError, ValueError):
    """Invalid argument or violated precondition."""


class FormatError(ShapeRetError, ValueError):
    """Corrupt, truncated, or wrong-version file payload."""


class FingerprintError(FormatError):
    """Artifact fingerprint does not match the current encoder weights."""


class NumericError(ShapeRetError, ArithmeticError):
    """Non-finite value encountered where the computation cannot continue."""
