"""Optimal liquidation in a Level-I limit order book."""

__version__ = "0.1.0"
