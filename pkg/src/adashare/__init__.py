"""Learned select-or-skip layer sharing for multi-task residual networks."""

__version__ = "0.1.0"
