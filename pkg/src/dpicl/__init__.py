"""Differentially private in-context learning with nearest-neighbor retrieval."""

__version__ = "0.1.0"
