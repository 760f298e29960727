"""Interpretable imitation learning: STL task inference + policy synthesis."""

__version__ = "0.1.0"
