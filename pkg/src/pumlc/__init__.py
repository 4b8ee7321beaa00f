"""Positive-unlabeled multi-label classification toolkit."""

__version__ = "0.1.0"
