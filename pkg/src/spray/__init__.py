"""Spectral relevance analysis of attribution maps."""

__version__ = "0.1.0"
