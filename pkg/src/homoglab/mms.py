"""Manufactured-solution self test of the P1 solver.

``-Laplace(u) = 2 pi^2 sin(pi x) sin(pi y)`` on the unit square with zero
Dirichlet data has the exact solution ``u = sin(pi x) sin(pi y)``. Errors
are integrated with a fourth-order rule so quadrature does not pollute the
rates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .mesh import EdgeTag, structured_square_mesh

H1_BAND = (0.9, 1.1)
L2_BAND = (1.8, 2.2)


def exact(x):
    return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


def exact_gradient(x):
    s, c = np.sin(np.pi * x), np.cos(np.pi * x)
    return np.pi * np.stack([c[..., 0] * s[..., 1], s[..., 0] * c[..., 1]], axis=-1)


def forcing(x):
    return 2 * np.pi**2 * exact(x)


def solve_level(n: int, tol: float = 1e-12):
    """P1 solution on the ``n x n`` structured mesh and its (H1-semi, L2) errors."""
    mesh = structured_square_mesh(n)
    geo = fem.p1_gradients(mesh)
    system = fem.SparseSystem(fem.assemble_stiffness(mesh, 1.0, geometry=geo),
                              fem.assemble_load(mesh, forcing, order=4, geometry=geo))
    system = fem.constrain(system, fem.Dirichlet.on_tag(mesh, EdgeTag.EXTERIOR, 0.0))
    u, _ = fem.solve_spd(system, tol=tol, max_iter=20 * n * n)
    areas, grads = geo
    rule = fem.triangle_rule(4)
    x = fem.quadrature_points(mesh, rule)
    uq = u[mesh.triangles] @ rule.points.T
    gh = fem.element_gradients(mesh, u, grads)[:, None, :]
    dg = gh - exact_gradient(x)
    h1 = np.sqrt(np.sum(areas * (np.einsum("tqd,tqd->tq", dg, dg) @ rule.weights)))
    l2 = np.sqrt(np.sum(areas * (((uq - exact(x)) ** 2) @ rule.weights)))
    return mesh, u, float(h1), float(l2)


@dataclass
class MMSResult:
    h: list
    h1_errors: list
    l2_errors: list
    h1_slope: float
    l2_slope: float
    bands: dict = field(default_factory=lambda: {"h1": H1_BAND, "l2": L2_BAND})

    @property
    def passed(self) -> bool:
        return (H1_BAND[0] <= self.h1_slope <= H1_BAND[1]) and (L2_BAND[0] <= self.l2_slope <= L2_BAND[1])


def run_mms(levels=(8, 16, 32, 64)) -> MMSResult:
    from .corrector import fit_rate

    h, e1, e2 = [], [], []
    for n in levels:
        _, _, a, b = solve_level(n)
        h.append(1.0 / n)
        e1.append(a)
        e2.append(b)
    return MMSResult(h, e1, e2, fit_rate(h, e1)[0], fit_rate(h, e2)[0])
