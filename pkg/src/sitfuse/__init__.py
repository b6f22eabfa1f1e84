"""Situational fusion of perception representations for grid navigation."""

__version__ = "0.1.0"
