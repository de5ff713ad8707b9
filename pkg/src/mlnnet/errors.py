"""Exception hierarchy. Each family maps to a CLI exit code."""


class MLNError(Exception):
    exit_code = 1


class ConfigError(MLNError, ValueError):
    exit_code = 2


class DataError(MLNError):
    exit_code = 3


class IntegrityError(MLNError):
    exit_code = 4


class NumericError(MLNError, ArithmeticError):
    exit_code = 5


class ShapeError(ConfigError):
    pass


class SelectionError(ConfigError, IndexError):
    pass


class SignatureError(MLNError):
    """Signatures that cannot be compared (length mismatch, zero norm, empty recorder)."""

    exit_code = 5


class DegenerateSignatureError(SignatureError, ValueError):
    """A zero-norm signature vector or a constant image with no foreground."""
