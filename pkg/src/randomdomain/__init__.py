"""Sparse-grid stochastic collocation for a parabolic PDE on a randomly deformed square."""

__version__ = "0.1.0"
