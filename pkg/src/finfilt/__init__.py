"""Filtering toolkit: projection filters, CIR quasi-likelihood estimation and regime hedging."""

__version__ = "0.1.0"
