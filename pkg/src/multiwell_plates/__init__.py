"""Thin multi-well plates: energy densities, plate limit functionals, recovery
sequences, optimal rotations under dead loads and limit-energy minimization."""

__version__ = "0.1.0"
