"""Learning-based active stabilization of a quadruped on moving platforms."""

__version__ = "0.1.0"
