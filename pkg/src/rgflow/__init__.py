"""Lattice laboratory for a renormalization-group flow approach to a
singular fractional elliptic equation on the torus."""

__version__ = "0.1.0"
