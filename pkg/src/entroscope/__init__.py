"""Entropy coefficients of local probe measures and verifiers built on them."""

__version__ = "0.1.0"
