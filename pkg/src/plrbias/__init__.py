"""Recursive pseudo-linear-regression vs prediction-error identification and their bias distributions."""

__version__ = "0.1.0"
