"""Calibration-weighted stratified causal win ratio for clustered data."""

__version__ = "0.1.0"
