"""Federated sequence-aware matrix factorization for next-app prediction."""

__version__ = "0.1.0"
