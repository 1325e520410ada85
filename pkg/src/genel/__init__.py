"""Retrieval-guided generative entity linking."""

__version__ = "0.1.0"
