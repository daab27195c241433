"""Dynkin-game / singular-control numerical laboratory."""

__version__ = "0.1.0"
