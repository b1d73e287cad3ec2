"""Exception types shared across the package."""


class AdnError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(AdnError, ValueError):
    """Invalid configuration value or combination."""


class DataError(AdnError, ValueError):
    """Malformed input data (parse errors, inconsistent series)."""


class ShapeError(AdnError, ValueError):
    """Tensor shape mismatch; the message names the offending shapes."""


class EvaluationError(AdnError, ValueError):
    """An evaluation was requested over an empty set of valid events."""


class DivergenceError(AdnError, RuntimeError):
    """Training produced non-finite losses or gradients."""
