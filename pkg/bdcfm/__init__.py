# bdcfm/__init__.py
"""Bayesian dynamic clustering factor models for longitudinal panels."""

__version__ = "0.1.0"
