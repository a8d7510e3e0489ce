"""Smoothness-regularized unsupervised domain adaptation on small dense networks."""

__version__ = "0.1.0"
