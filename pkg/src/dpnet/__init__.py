"""Dual perception network: joint underwater detection and enhancement with bilevel training."""

__version__ = "0.1.0"
