"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (e.g. backward on an unrecorded tensor)."""


class ConfigError(ValueError):
    """Invalid model/task/training configuration. CLI maps this to exit 2."""


class ParseError(ValueError):
    """Malformed external data file; message carries the offending line."""


class DivergenceError(NumericError):
    """Training loss left the finite domain. CLI maps this to exit 3."""
