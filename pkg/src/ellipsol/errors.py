"""Exception hierarchy shared by all solver modules."""


class EllipsolError(Exception):
    """Base class for all errors raised by this package."""


class NoInteriorNodes(EllipsolError):
    """Grid construction produced an empty interior (spacing too large)."""


class NodeNotInterior(EllipsolError):
    """An operation restricted to interior nodes was asked about a boundary node."""


class RequiresInterpolant(EllipsolError):
    """Off-lattice evaluation of a purely nodal function was requested."""


class StencilExhausted(EllipsolError):
    """No nonnegative stencil decomposition was found within the allowed width.

    Attributes
    ----------
    residual : float
        Smallest decomposition residual reached before giving up.
    node : optional
        Node index at which assembly failed, when raised during assembly.
    """

    def __init__(self, message, residual=None, node=None, control=None):
        super().__init__(message)
        self.residual = residual
        self.node = node
        self.control = control


class SingularSystem(EllipsolError):
    """A linear sub-solve broke down; unreachable for positive-type operators."""


class NoConvergence(EllipsolError):
    """An iterative solver hit its iteration cap.

    Carries the iteration trace collected so far in ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class Diverging(NoConvergence):
    """Residual growth detected in a fixed-point iteration."""


class DegenerateHull(EllipsolError):
    """Node set is degenerate (collinear) so no 2D envelope exists."""


class BoundaryNotNonnegative(EllipsolError):
    """Alexandrov-type estimate requested for data that is negative on the boundary."""


class NoConvexSubsolution(EllipsolError):
    """Initialization of the subdifferential solver failed (boundary data not convex-extendable)."""


class EmptyControlSet(EllipsolError):
    """A Bellman-type operator was given no controls."""


class LatticeMismatch(EllipsolError):
    """Operands refer to different lattices."""


class ConfigError(EllipsolError):
    """Experiment configuration is malformed; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"config line {line}: {message}"
        super().__init__(message)
        self.line = line
