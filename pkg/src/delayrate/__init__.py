"""Pricing and calibration for short-rate models with delay terms."""

__version__ = "0.1.0"
