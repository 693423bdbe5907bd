"""Cine cardiac MR registration and strain with sine-activated coordinate networks."""

__version__ = "0.1.0"
