"""Learnable submodular, alpha-submodular and non-monotone set functions."""

__version__ = "0.1.0"
