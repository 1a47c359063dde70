"""Superdiffusion simulation and verification toolkit."""

__version__ = "1.0.0"
