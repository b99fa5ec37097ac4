"""Exponential convergence rates of nonnegative stochastic processes."""

__version__ = "0.1.0"
