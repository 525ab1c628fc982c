"""Hierarchical interest fusion for CTR prediction in product search."""

__version__ = "0.1.0"
