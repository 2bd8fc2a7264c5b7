"""Steer-to-balance bicycle control lab."""

__version__ = "0.1.0"
