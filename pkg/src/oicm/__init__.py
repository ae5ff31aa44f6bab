"""Entropy-constrained feature learning and learned feature compression."""

__version__ = "0.1.0"
