"""Monotone lattice solvers for fully nonlinear second-order elliptic PDEs.

Building blocks: translation-invariant lattices, positive-type finite
difference operators, discrete convex geometry (envelopes and nodal
subdifferentials), policy-iteration solvers for Bellman/Isaacs systems, and
three Monge-Ampere discretizations, plus a verification harness with
manufactured convergence studies.
"""

from .errors import EllipsolError

__version__ = "0.1.0"

__all__ = ["EllipsolError", "__version__"]
