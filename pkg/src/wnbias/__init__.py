"""Implicit-bias experiments for exponential and standard weight normalization."""

__version__ = "0.1.0"
