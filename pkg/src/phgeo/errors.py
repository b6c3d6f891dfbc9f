"""Exception hierarchy shared by every module of the package."""


class PhgeoError(Exception):
    """Base class for all errors raised by phgeo."""


class SingularStructure(PhgeoError):
    """theta ^ (d theta)^m degenerates, so the Reeb field is not determined."""


class NotPositiveDefinite(PhgeoError):
    """The Webster metric has a non-positive eigenvalue (chart not strictly pseudoconvex)."""


class ChartBoundary(PhgeoError):
    """A point lies outside the validity box of the chart."""


class TorsionInvalid(PhgeoError):
    """A user-supplied pseudo-Hermitian torsion violates its structural identities."""


class DegeneratePlane(PhgeoError):
    """Two vectors do not span a 2-plane."""


class NotHorizontal(PhgeoError):
    """A vector expected to lie in H(M) has a vertical component."""


class LeftDomain(PhgeoError):
    """An integrated curve left the chart box."""

    def __init__(self, t_exit, message=None):
        self.t_exit = float(t_exit)
        super().__init__(message or f"curve left the chart domain at t={self.t_exit:.6g}")


class StepTooLarge(PhgeoError):
    """The Richardson error monitor could not reach its target by step halving."""


class GridMismatch(PhgeoError):
    """A sampled field is not sampled on the grid of its base curve."""


class NoConvergence(PhgeoError):
    def __init__(self, iterations, best_residual, message=None):
        self.iterations = int(iterations)
        self.best_residual = float(best_residual)
        super().__init__(
            message
            or f"no convergence after {self.iterations} iterations "
            f"(best residual {self.best_residual:.3e})"
        )


class SingularJacobian(PhgeoError):
    """dexp is singular at the current shooting iterate (a conjugate point blocks Newton)."""


class ModeMismatch(PhgeoError):
    """The requested Jacobi mode is incompatible with the connection's torsion mode."""


class NotArcLength(PhgeoError):
    """A geodesic expected to be unit speed is not."""


class NotHeisenberg(PhgeoError):
    """A Heisenberg-only oracle was asked about a different manifold."""


class ConjugatePointPresent(PhgeoError):
    """The base point has a conjugate point on the segment, violating a precondition."""
