"""Exception hierarchy shared by all nestpart modules."""


class NestpartError(Exception):
    """Base class for errors raised by nestpart."""


class MeshError(NestpartError, ValueError):
    """Invalid forest description (overlap, gaps, bad level)."""


class InfeasiblePartitionError(NestpartError, ValueError):
    """More device elements were requested than the node's interior holds."""

    def __init__(self, requested, max_feasible, node=None):
        self.requested = requested
        self.max_feasible = max_feasible
        self.node = node
        where = "" if node is None else f" on node {node}"
        super().__init__(
            f"k_dev={requested} exceeds interior supply{where}; "
            f"maximum feasible k_dev is {max_feasible}"
        )


class MissingCalibrationError(NestpartError, KeyError):
    """The kernel time table has no entry for a requested (kernel, N, device)."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing calibration"


class NumericalError(NestpartError, FloatingPointError):
    """Non-finite values appeared during time integration."""


class ReportError(NestpartError, ValueError):
    """Malformed or empty report input."""
