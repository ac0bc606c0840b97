"""Deterministic multi-agent driving simulator."""

__version__ = "0.1.0"
