"""Numerical relaxation of second-order linear-growth functionals on BH fields."""

__version__ = "0.1.0"
