"""Sparse-view radiance fields trained under physics-guided constraints."""

__version__ = "0.1.0"
