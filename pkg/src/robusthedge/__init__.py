"""Robust hedging under model uncertainty."""

__version__ = "0.1.0"
