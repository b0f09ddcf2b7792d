"""Stabilized H(div)-conforming finite element solvers for incompressible MHD."""

__version__ = "0.1.0"
