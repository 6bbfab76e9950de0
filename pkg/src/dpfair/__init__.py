"""Differentially private synthetic tabular data with fairness auditing."""

__version__ = "0.1.0"
