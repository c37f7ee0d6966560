"""Evolving-surface finite elements and control-constrained optimal control on moving spheres."""

__version__ = "0.1.0"
