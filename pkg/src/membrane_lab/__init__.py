"""Numerical laboratory for the discrete membrane (Bilaplacian) model."""

__version__ = "0.1.0"
