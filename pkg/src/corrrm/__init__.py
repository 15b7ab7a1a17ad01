"""Correlated random measures and correlated nonparametric Poisson factorization."""

__version__ = "0.1.0"
