"""Exception hierarchy shared by every stage of the laboratory."""


class HomogLabError(Exception):
    """Base class for all package errors."""


class GeometryError(HomogLabError):
    pass


class MeshingError(HomogLabError):
    pass


class NotFoundError(HomogLabError):
    """Point lies in a hole or outside the meshed region."""


class CoercivityError(HomogLabError):
    pass


class ConstraintError(HomogLabError):
    pass


class NonConvergenceError(HomogLabError):
    """An iteration hit its cap. ``residual`` and ``trace`` hold the last state."""

    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = list(trace) if trace is not None else []


class DivergenceError(NonConvergenceError):
    pass


class IndefiniteError(CoercivityError):
    """Conjugate gradients met a direction of non-positive curvature."""


class ConfigError(HomogLabError):
    """Invalid configuration. ``key`` is the dotted path of the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
