"""Simulation and verification of Ito's formula for flows of conditional measures."""

__version__ = "0.1.0"
