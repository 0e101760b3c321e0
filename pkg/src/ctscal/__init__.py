"""Consistency-guided temperature scaling for out-of-domain calibration."""

__version__ = "0.1.0"
