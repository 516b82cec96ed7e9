"""Exception types raised across the package."""


class PGSError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(PGSError, ValueError):
    pass


class SingularMomentError(PGSError):
    """Moment matrix at an evaluation point is singular or ill-conditioned.

    Usually means the support radius is too small for the kernel-center
    layout; enlarge the support.
    """

    def __init__(self, point_indices, reason=""):
        if isinstance(point_indices, int):
            point_indices = [point_indices]
        self.point_indices = list(point_indices)
        self.reason = reason
        shown = self.point_indices[:10]
        more = "" if len(self.point_indices) <= 10 else f" (+{len(self.point_indices) - 10} more)"
        super().__init__(f"singular moment matrix at point(s) {shown}{more}: {reason}")


class RankDeficiencyError(PGSError):
    def __init__(self, smallest_singular_value, condition):
        self.smallest_singular_value = smallest_singular_value
        self.condition = condition
        super().__init__(
            f"shape matrix is rank deficient: smallest singular value "
            f"{smallest_singular_value:.3e} (condition {condition:.3e})"
        )


class DegenerateBondError(PGSError):
    def __init__(self, node, neighbor):
        self.node = node
        self.neighbor = neighbor
        super().__init__(f"bond {node} -> {neighbor} collapsed to zero length")


class InvalidModelError(PGSError, ValueError):
    pass


class MissingBoundaryError(PGSError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"missing boundary data for {len(self.nodes)} node(s): {self.nodes[:20]}")


class ZeroDenominatorError(PGSError, ZeroDivisionError):
    pass


class NonConvergenceError(PGSError):
    def __init__(self, message, residual_history):
        self.residual_history = list(residual_history)
        super().__init__(message)


class SnapshotParseError(PGSError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")
