"""Finite-lattice KAM workbench for the disordered nonlinear Stark lattice."""

__version__ = "0.1.0"
