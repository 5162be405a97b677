"""Secure three-way authentication protocol simulator."""

__version__ = "0.1.0"
