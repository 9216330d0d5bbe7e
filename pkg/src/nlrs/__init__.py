"""Quasi-periodic breathers of the random nonlinear lattice Schrodinger equation."""

__version__ = "0.1.0"
