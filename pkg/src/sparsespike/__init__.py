"""Robust sparse ANN-to-SNN conversion toolkit."""

__version__ = "0.1.0"
