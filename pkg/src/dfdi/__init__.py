"""Probabilistic fault detection and identification for a reaction-wheel spacecraft."""

__version__ = "0.1.0"
