"""Punctured unit cell, tiled perforated square and the boundary cut-off.

Points are always ``(..., 2)`` arrays; every function here is vectorised
over leading axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError

INTEGER_TOL = 1e-9


@dataclass(frozen=True)
class UnitCellGeometry:
    """Unit cell ``Y = (0,1)^2`` with one circular hole; ``Y1`` is the rest."""

    hole_center: tuple[float, float] = (0.5, 0.5)
    hole_radius: float = 0.25

    def __post_init__(self):
        cx, cy = (float(c) for c in self.hole_center)
        object.__setattr__(self, "hole_center", (cx, cy))
        r = float(self.hole_radius)
        object.__setattr__(self, "hole_radius", r)
        if not 0.0 <= r < 0.5:
            raise GeometryError(f"hole_radius must lie in [0, 0.5), got {r}")
        if not (0.0 < cx < 1.0 and 0.0 < cy < 1.0):
            raise GeometryError(f"hole_center {self.hole_center} is not inside the unit cell")
        if r > 0 and min(cx, 1 - cx, cy, 1 - cy) <= r:
            raise GeometryError("hole touches the cell boundary")

    @property
    def perforated(self) -> bool:
        return self.hole_radius > 0.0

    @property
    def exact_measure(self) -> float:
        """Analytic ``|Y1| = 1 - pi r^2``."""
        return 1.0 - math.pi * self.hole_radius**2

    @property
    def exact_perimeter(self) -> float:
        return 2.0 * math.pi * self.hole_radius


def cells_per_side(eps: float) -> int:
    """Return ``n = 1/eps``, insisting that it is an integer >= 1."""
    if not eps > 0:
        raise GeometryError(f"eps must be positive, got {eps}")
    n = round(1.0 / eps)
    if n < 1 or abs(n * eps - 1.0) > INTEGER_TOL:
        raise GeometryError("1/eps must be an integer")
    return n


@dataclass(frozen=True)
class PerforatedDomainGeometry:
    """``Omega^eps``: the unit square tiled by ``n x n`` scaled copies of the cell."""

    cell: UnitCellGeometry
    epsilon: float

    def __post_init__(self):
        cells_per_side(self.epsilon)

    @property
    def n(self) -> int:
        return cells_per_side(self.epsilon)

    @property
    def cell_count(self) -> int:
        return self.n**2

    @property
    def exact_measure(self) -> float:
        return self.cell.exact_measure

    @property
    def exact_hole_perimeter(self) -> float:
        """Total length of ``Gamma^eps``: ``n^2 * 2 pi r eps = 2 pi r / eps``."""
        return self.cell_count * self.cell.exact_perimeter * self.epsilon


def hole_signed_distance(y, cell: UnitCellGeometry):
    """Signed distance to the hole boundary; negative inside the hole."""
    y = np.asarray(y, dtype=float)
    d = y - np.asarray(cell.hole_center)
    return np.hypot(d[..., 0], d[..., 1]) - cell.hole_radius


def wrap_to_cell(x, eps: float):
    """Split macro points into ``(cell_index, y)`` with ``x = eps*(cell_index + y)``."""
    x = np.asarray(x, dtype=float)
    s = x / eps
    idx = np.floor(s)
    return idx.astype(np.int64), s - idx


def smoothstep(t):
    """C^1 cubic ramp: 0 for t <= 1, 1 for t >= 2."""
    s = np.clip(np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def smoothstep_derivative(t):
    s = np.asarray(t, dtype=float) - 1.0
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, 6.0 * s * (1.0 - s), 0.0)


# Edges of the unit square in tie-break order, with inward normals.
_EDGE_NORMALS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


def distance_to_square_boundary(x):
    """Distance to the boundary of the unit square plus its (piecewise) gradient.

    On ties between edges the first edge in the order left, right, bottom,
    top wins.
    """
    x = np.asarray(x, dtype=float)
    cand = np.stack([x[..., 0], 1.0 - x[..., 0], x[..., 1], 1.0 - x[..., 1]], axis=-1)
    nearest = np.argmin(cand, axis=-1)
    dist = np.take_along_axis(cand, nearest[..., None], axis=-1)[..., 0]
    return dist, _EDGE_NORMALS[nearest]


@dataclass(frozen=True)
class CutoffFunction:
    """``m^eps(x) = psi(dist(x, dOmega)/eps)``.

    Vanishes in the strip of width ``eps`` along the outer boundary and
    equals one at distance ``2 eps`` and beyond.
    """

    epsilon: float

    def value(self, x):
        dist, _ = distance_to_square_boundary(x)
        return smoothstep(dist / self.epsilon)

    def value_and_gradient(self, x):
        dist, normal = distance_to_square_boundary(x)
        t = dist / self.epsilon
        grad = (smoothstep_derivative(t) / self.epsilon)[..., None] * normal
        return smoothstep(t), grad

    __call__ = value


def cutoff_value_and_gradient(x, eps: float):
    return CutoffFunction(eps).value_and_gradient(x)


# Maximum of |psi'| for the cubic profile.
CUTOFF_SLOPE_BOUND = 1.5
