"""Overdamped limits of kinetic Langevin dynamics: simulation and spectral checks."""
__version__ = "0.1.0"
