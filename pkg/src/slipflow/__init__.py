"""Spectral Galerkin toolkit for stochastic channel flow with slip-wall boundary control.

Subpackages cover the periodic-channel geometry, the slip-wall Stokes
eigenbasis, lifting of non-homogeneous boundary data, Galerkin SDE
simulation, certification of weighted energy estimates, and a boundary
velocity-tracking optimizer.
"""

__version__ = "0.1.0"
