"""Periodic homogenization lab for reaction-diffusion systems in perforated domains."""

from .errors import (CoercivityError, ConfigError, ConstraintError, DivergenceError, GeometryError,
                     HomogLabError, IndefiniteError, MeshingError, NonConvergenceError, NotFoundError)

__version__ = "0.1.0"

__all__ = [
    "CoercivityError", "ConfigError", "ConstraintError", "DivergenceError", "GeometryError",
    "HomogLabError", "IndefiniteError", "MeshingError", "NonConvergenceError", "NotFoundError",
]
