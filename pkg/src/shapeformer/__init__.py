"""Shapelet transformer for multivariate time-series classification."""

__version__ = "0.1.0"
