"""Numerical laboratory for Fisher-KPP fronts and the Bramson shift."""

__version__ = "0.1.0"
