"""Sparsely-encoded hierarchical Poisson matrix factorization."""

__version__ = "0.1.0"
