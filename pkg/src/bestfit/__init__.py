"""Optimal-prediction closures for reduced Hamiltonian dynamics."""

__version__ = "0.1.0"
