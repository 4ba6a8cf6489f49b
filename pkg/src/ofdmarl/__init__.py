"""OFDMA downlink scheduling workbench.

A deterministic cell simulator (UE mobility, QoS traffic, channel quality,
per-PRB allocation), classical baseline schedulers, a from-scratch dense
neural network stack, a deep-Q scheduling agent, and a training/evaluation/
benchmark harness with a single CLI entry point.
"""

from ofdmarl.errors import ActionError, ConfigError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ActionError",
    "ConfigError",
    "NumericError",
    "ShapeError",
    "__version__",
]
