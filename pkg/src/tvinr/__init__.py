"""Temporal variational implicit neural representations for irregular time series."""

__version__ = "0.1.0"
