"""Rearrangement inequalities for random walks and Lévy processes, checked numerically."""

__version__ = "0.1.0"
