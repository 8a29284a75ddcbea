"""Differentiable compressive fluorescence microscopy simulator."""

__version__ = "0.1.0"
