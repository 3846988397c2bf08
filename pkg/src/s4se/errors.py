"""Exception hierarchy shared by all modules.

The CLI maps the three families below onto exit codes 2, 3 and 4.
"""


class ConfigError(ValueError):
    """Invalid configuration or mismatched checkpoint/config pair."""


class DataError(ValueError):
    """Bad or missing input data."""


class NumericalError(ArithmeticError):
    """A computation left its numerically valid regime."""


class DimensionMismatch(ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class InvalidDelta(ValueError):
    pass


class SingularMatrix(NumericalError):
    pass


class NumericalInstability(NumericalError):
    pass


class NonFiniteActivation(NumericalError):
    pass


class SignalTooShort(DataError):
    pass


class ColaViolation(ConfigError):
    pass


class InsufficientData(DataError):
    pass


class ZeroReference(DataError):
    pass


class ZeroPowerInput(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class CorruptHeader(DataError):
    pass


class ConfigMismatch(ConfigError):
    pass


class DisconnectedGraph(UserWarning):
    """A parameter the loss does not depend on; its gradient is reported as zero."""
