"""Adaptive heat-kernel integral-equation time stepping on the periodic unit square."""

__version__ = "0.1.0"
