"""Replacement-policy state that survives cache flushes: simulation and leakage analysis."""

__version__ = "0.1.0"
