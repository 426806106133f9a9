"""Exception types shared across the package.

Every error carries enough context in its message to locate the failing
invariant. The CLI maps :class:`ValidationError` subclasses to exit code 2
and :class:`SolverError` subclasses to exit code 3.
"""


class SplashError(Exception):
    """Base class for all package errors."""


class ValidationError(SplashError, ValueError):
    """Input rejected before any numerical work."""


class SolverError(SplashError, RuntimeError):
    """Numerical failure during a construction or time-stepping stage."""


# conformal
class PointOnBranchCut(ValidationError):
    """A point lies on (or numerically too close to) the branch cut."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


# geometry
class DegenerateCurve(ValidationError):
    """Curve too short, too coarse or otherwise unusable."""


class Outside(ValidationError):
    """Point farther from the curve than the tubular half-width."""


class AmbiguousProjection(ValidationError):
    """Two distinct arcs are (nearly) equally close to a point."""


# mesh_fields
class MeshingFailed(SolverError):
    """Triangulation of the curve interior failed."""


class EigenbasisUnavailable(ValidationError):
    """Spectral norm requested without a precomputed eigenbasis."""


class TooFewSamples(ValidationError):
    """Time series too short for the requested number of modes."""


# initdata
class TraceFailure(SolverError):
    """A field could not be evaluated on the boundary."""


class TubularOverlap(ValidationError):
    """Tubular half-width too large for the curvature of the boundary."""


class EllipticSolveFailed(SolverError):
    """Scalar elliptic solve failed."""


class CompatibilityFailed(ValidationError):
    """Initial data violate the compatibility conditions."""


# stokes_solver
class SingularSystem(SolverError):
    """Saddle-point matrix could not be factorized."""


class LinearSolveFailed(SolverError):
    """Per-step algebraic residual above tolerance."""


class DataTraceViolation(ValidationError):
    """Data do not vanish at t=0 as the zero-trace data space requires."""


# picard
class FluxDegenerate(SolverError):
    """det of the flux gradient dropped below the floor."""


class NoConvergence(SolverError):
    """Fixed-point iteration did not converge after all slab halvings."""


# splash_experiment
class GridMismatch(ValidationError):
    """Two runs do not share a common time grid."""


# cli
class MissingCheckpoint(ValidationError):
    """Checkpoint directory missing or empty."""
