"""Constructive weak factorization of H^1(R^n) through multilinear Riesz transforms."""

__version__ = "0.1.0"
