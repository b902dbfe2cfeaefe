"""Particle flow measurement updates built on truncated Taylor polynomial algebra."""

__version__ = "0.1.0"
