"""Relative positional encoding laboratory built around FIRE."""

__version__ = "0.1.0"
