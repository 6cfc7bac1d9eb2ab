"""Optimal investment, basic/luxury consumption and voluntary retirement."""

__version__ = "0.1.0"
