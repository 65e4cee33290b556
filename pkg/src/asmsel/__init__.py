"""Acoustic segment model front-end segment selection for scene classification."""

__version__ = "0.1.0"
