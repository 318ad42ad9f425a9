"""Stochastic coarse-to-fine patch registration for 3D volumes."""

__version__ = "0.1.0"
