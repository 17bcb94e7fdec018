"""Exception types shared across the package."""


class LensrigError(Exception):
    """Base class for all package errors."""


class OutOfChart(LensrigError):
    """Evaluation point left the (extended) coordinate chart."""


class NotSPD(LensrigError):
    """Metric data is not symmetric positive definite at a point."""


class TangentialEntry(LensrigError):
    """Requested boundary direction is tangent to the boundary."""


class StepFailure(LensrigError):
    """Adaptive integrator step size underflowed."""


class NearGlancing(LensrigError):
    """Exit is too close to tangential for a stable gradient."""


class RankUnsupported(LensrigError):
    """Tensor rank outside the supported range {0, 1, 2}."""


class NoConvergence(LensrigError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics or {}


class InsufficientDecade(LensrigError):
    """Escape-curve fit window spans less than one decade of decay."""


class GridMismatch(LensrigError):
    """Two datasets live on incompatible grids."""


class BoundaryMetricMismatch(LensrigError):
    """Geometries do not agree on the boundary tangent metric."""


class TrappedUnderPerturbation(LensrigError):
    """A ray became trapped for a perturbed metric in a variational check."""


class NonuniqueGeodesic(LensrigError):
    """Two-point boundary value problem has multiple solutions."""


class DeltaTooLarge(LensrigError):
    """Exponential weight exceeds half the estimated escape rate."""


class ConfigParse(LensrigError):
    """Run configuration failed to parse or validate."""
