"""Covariate selection for randomized trials with censored endpoints."""

__version__ = "0.1.0"
