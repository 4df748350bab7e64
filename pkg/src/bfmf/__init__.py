"""Sparse multifrontal solver with butterfly-compressed fronts."""

__version__ = "0.1.0"
