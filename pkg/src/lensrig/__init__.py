"""Numerical laboratory for lens-data geometry and tensor tomography on
2-D Riemannian manifolds with strictly convex boundary."""

__version__ = "0.1.0"
