"""Successor features with binned cumulants, GPE/GPI transfer and exact oracles."""

__version__ = "0.1.0"
