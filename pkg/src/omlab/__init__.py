"""Numerical laboratory for Onsager-Machlup functionals on sampled metric measure spaces."""

__version__ = "0.1.0"
