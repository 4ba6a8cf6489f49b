"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (bad field value, inconsistent sections)."""


class ActionError(IndexError):
    """Action or index outside the valid range."""


class ShapeError(ValueError):
    """Tensor dimensions do not chain."""


class StaleCacheError(RuntimeError):
    """Backward pass invoked with a cache from a different forward pass."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where a finite one is required."""
