"""Cell problems, effective coefficients, the macro limit and the expansion.

Cascade conventions (``n`` is the unit normal on the hole boundary pointing
out of ``Y1``):

* first order: ``chi_j`` periodic, zero mean, with
  ``int d grad(chi_j).grad(v) = int d dv/dy_j`` for periodic ``v``;
  ``u1 = -sum_j chi_j d_j u0``.
* effective tensor ``dhat[j, k] = int_Y1 d (delta_jk - d chi_k / dy_j)``.
* macro limit ``-div(dhat grad u0) - A u0 + B F(u0) = |Y1| (f + R(u0))``.
* second order ``u2 = sum_jk Theta_jk d_jk u0 + w_R (f + R(u0)) + w_a u0 + w_b F(u0)``
  where each response solves the Neumann cell problem with its load minus
  the compatibility mean, which is recorded.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fem
from .errors import CoercivityError, HomogLabError
from .geometry import CutoffFunction
from .mesh import EdgeTag, PointLocator, TriMesh, read_mesh, write_mesh
from .nonlinear import PicardConfig, ReactionSystem, picard_solve

log = logging.getLogger(__name__)

QUAD_ORDER = 2


def _periodic_system(cell_mesh, matrix, rhs):
    s = fem.SparseSystem(matrix, rhs)
    s = fem.constrain(s, fem.Periodic.from_mesh(cell_mesh))
    return fem.constrain(s, fem.ZeroMean.from_mesh(cell_mesh))


@dataclass
class SpeciesCell:
    """Cell data of one species."""

    chi: np.ndarray  # (2, nv)
    d_hat: np.ndarray  # (2, 2)
    A: float
    B: float
    theta: np.ndarray  # (2, 2, nv)
    w_R: np.ndarray
    w_a: np.ndarray
    w_b: np.ndarray
    means: dict = field(default_factory=dict)  # "theta" (2,2), "w_R", "w_a", "w_b"
    cg_iterations: int = 0


@dataclass
class CellSolutions:
    mesh: TriMesh
    Y1_measure: float
    species: list

    def save(self, directory) -> None:
        """Write the cell mesh, one text file per field and a JSON manifest."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_mesh(self.mesh, out / "cell_mesh.txt")
        manifest = {"Y1_measure": self.Y1_measure, "n_species": len(self.species), "species": []}
        for i, s in enumerate(self.species):
            files = {}
            for name, arr in _species_fields(s).items():
                fname = f"species{i + 1}_{name}.txt"
                np.savetxt(out / fname, arr, fmt="%.17g")
                files[name] = fname
            manifest["species"].append({
                "d_hat": s.d_hat.tolist(), "A": s.A, "B": s.B,
                "means": {k: np.asarray(v).tolist() for k, v in s.means.items()},
                "files": files,
            })
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "CellSolutions":
        src = Path(directory)
        manifest = json.loads((src / "manifest.json").read_text())
        mesh = read_mesh(src / "cell_mesh.txt")
        species = []
        for entry in manifest["species"]:
            f = {k: np.loadtxt(src / v) for k, v in entry["files"].items()}
            species.append(SpeciesCell(
                chi=np.stack([f["chi1"], f["chi2"]]),
                d_hat=np.array(entry["d_hat"]), A=entry["A"], B=entry["B"],
                theta=np.stack([[f["theta11"], f["theta12"]], [f["theta21"], f["theta22"]]]),
                w_R=f["w_R"], w_a=f["w_a"], w_b=f["w_b"],
                means={k: np.array(v) if isinstance(v, list) else v for k, v in entry["means"].items()},
            ))
        return cls(mesh, manifest["Y1_measure"], species)


def _species_fields(s: SpeciesCell) -> dict:
    return {
        "chi1": s.chi[0], "chi2": s.chi[1],
        "theta11": s.theta[0, 0], "theta12": s.theta[0, 1],
        "theta21": s.theta[1, 0], "theta22": s.theta[1, 1],
        "w_R": s.w_R, "w_a": s.w_a, "w_b": s.w_b,
    }


def _weighted_average(mesh, d):
    """Per-triangle ``area * quadrature mean`` of ``d``, and the raw samples."""
    rule = fem.triangle_rule(QUAD_ORDER)
    areas, grads = fem.p1_gradients(mesh)
    vals = fem.sample_coefficient(mesh, d, rule)
    return areas, grads, rule, vals


def solve_first_order_cell(cell_mesh: TriMesh, d, tol=1e-10, max_iter=20000):
    """Correctors ``chi_1, chi_2`` as a ``(2, nv)`` array."""
    areas, grads, rule, vals = _weighted_average(cell_mesh, d)
    K = fem.assemble_stiffness(cell_mesh, vals, order=QUAD_ORDER, geometry=(areas, grads))
    cbar = areas * (vals @ rule.weights)
    base = _periodic_system(cell_mesh, K, np.zeros(cell_mesh.n_vertices))
    reduced = fem.ReducedSystem(base)
    chi = np.zeros((2, cell_mesh.n_vertices))
    iters = 0
    for j in range(2):
        rhs = np.bincount(cell_mesh.triangles.ravel(), (cbar[:, None] * grads[:, :, j]).ravel(),
                          minlength=cell_mesh.n_vertices)
        chi[j], info = reduced.solve(rhs, tol=tol, max_iter=max_iter)
        iters += info.iterations
    return chi


def effective_quantities(cell_mesh: TriMesh, d, a, b, chi):
    """``(d_hat, |Y1|, A, B)`` from the correctors and the hole integrals."""
    areas, grads, rule, vals = _weighted_average(cell_mesh, d)
    cbar = areas * (vals @ rule.weights)
    gchi = np.stack([fem.element_gradients(cell_mesh, chi[k], grads) for k in range(2)])  # (k, t, j)
    d_hat = np.empty((2, 2))
    for j in range(2):
        for k in range(2):
            d_hat[j, k] = np.sum(cbar * ((j == k) - gchi[k, :, j]))
    y1 = float(areas.sum())
    A = _hole_integral(cell_mesh, a)
    B = _hole_integral(cell_mesh, b)
    return d_hat, y1, A, B


def _hole_integral(mesh, g):
    return float(fem.assemble_boundary_load(mesh, EdgeTag.HOLE, g, n_points=3).sum())


def second_order_loads(cell_mesh: TriMesh, d, a, b, chi) -> dict:
    """Weak right-hand sides of the second-order responses before compatibility.

    Keys ``(j, k)`` for Theta_jk, and ``"w_R"``, ``"w_a"``, ``"w_b"``; also
    ``"ones"`` (the load of a unit volume source).
    """
    nv = cell_mesh.n_vertices
    areas, grads, rule, vals = _weighted_average(cell_mesh, d)
    ones = fem.assemble_load(cell_mesh, 1.0, order=QUAD_ORDER, geometry=(areas, grads))
    tris = cell_mesh.triangles
    gchi = np.stack([fem.element_gradients(cell_mesh, chi[k], grads) for k in range(2)])
    chi_q = np.stack([chi[k][tris] @ rule.points.T for k in range(2)])  # (k, t, q)
    wq = rule.weights
    loads = {"ones": ones}
    for j in range(2):
        for k in range(2):
            # volume load d(delta_jk - d_j chi_k) against phi_a
            vol = (vals * ((j == k) - gchi[k, :, j])[:, None] * wq) @ rule.points * areas[:, None]
            # -d_j(d chi_k) integrated by parts; its hole term cancels the hole flux
            flux = (areas * ((vals * chi_q[k]) @ wq))[:, None] * grads[:, :, j]
            loads[(j, k)] = np.bincount(tris.ravel(), (vol + flux).ravel(), minlength=nv)
    loads["w_R"] = ones.copy()
    loads["w_a"] = fem.assemble_boundary_load(cell_mesh, EdgeTag.HOLE, a, n_points=3)
    loads["w_b"] = -fem.assemble_boundary_load(cell_mesh, EdgeTag.HOLE, b, n_points=3)
    return loads


def solve_second_order_cell(cell_mesh: TriMesh, d, a, b, chi, tol=1e-10, max_iter=20000):
    """Second-order responses and their recorded compatibility means."""
    nv = cell_mesh.n_vertices
    areas, grads, rule, vals = _weighted_average(cell_mesh, d)
    K = fem.assemble_stiffness(cell_mesh, vals, order=QUAD_ORDER, geometry=(areas, grads))
    reduced = fem.ReducedSystem(_periodic_system(cell_mesh, K, np.zeros(nv)))
    loads = second_order_loads(cell_mesh, d, a, b, chi)
    ones = loads["ones"]
    y1 = float(ones.sum())

    def respond(rhs):
        mean = rhs.sum() / y1
        sol, _ = reduced.solve(rhs - mean * ones, tol=tol, max_iter=max_iter)
        return sol, float(mean)

    theta = np.zeros((2, 2, nv))
    theta_mean = np.zeros((2, 2))
    for j in range(2):
        for k in range(2):
            theta[j, k], theta_mean[j, k] = respond(loads[(j, k)])
    w_R, m_R = respond(loads["w_R"])
    w_a, m_a = respond(loads["w_a"])
    w_b, m_b = respond(loads["w_b"])
    means = {"theta": theta_mean, "w_R": m_R, "w_a": m_a, "w_b": m_b}
    return theta, w_R, w_a, w_b, means


def solve_cells(cell_mesh: TriMesh, d_list, a_list, b_list, tol=1e-10, max_iter=20000) -> CellSolutions:
    """All cell problems for every species; identical species share one solve."""
    cache = {}
    species = []
    y1 = cell_mesh.area()
    for d, a, b in zip(d_list, a_list, b_list):
        key = (repr(d), repr(a), repr(b))
        if key not in cache:
            chi = solve_first_order_cell(cell_mesh, d, tol, max_iter)
            d_hat, y1, A, B = effective_quantities(cell_mesh, d, a, b, chi)
            theta, w_R, w_a, w_b, means = solve_second_order_cell(cell_mesh, d, a, b, chi, tol, max_iter)
            cache[key] = SpeciesCell(chi, d_hat, A, B, theta, w_R, w_a, w_b, means)
        species.append(cache[key])
    return CellSolutions(cell_mesh, y1, species)


# -- derivative recovery ------------------------------------------------------

def _patch_pairs(mesh: TriMesh):
    t = mesh.triangles
    v = np.repeat(t, 3, axis=1).ravel()
    w = np.tile(t, (1, 3)).ravel()
    key = np.unique(v.astype(np.int64) * mesh.n_vertices + w)
    v, w = key // mesh.n_vertices, key % mesh.n_vertices
    # vertices whose fan cannot determine a plane get the two-ring patch
    bad = _degenerate(mesh, v, w)
    if bad.any():
        hop = np.isin(v, np.flatnonzero(bad))
        first = {}
        for a, b in zip(v[hop], w[hop]):
            first.setdefault(int(a), []).append(int(b))
        extra = []
        for a, nbrs in first.items():
            ring = np.unique(np.concatenate([w[v == b] for b in nbrs]))
            extra.append(np.column_stack([np.full(len(ring), a), ring]))
        ev = np.concatenate([np.column_stack([v, w])] + extra)
        key = np.unique(ev[:, 0] * mesh.n_vertices + ev[:, 1])
        v, w = key // mesh.n_vertices, key % mesh.n_vertices
    return v, w


def _normal_matrices(mesh, v, w):
    dx = mesh.vertices[w] - mesh.vertices[v]
    basis = np.column_stack([np.ones(len(v)), dx])  # (p, 3)
    normal = np.zeros((mesh.n_vertices, 3, 3))
    np.add.at(normal, v, basis[:, :, None] * basis[:, None, :])
    return basis, normal


def _degenerate(mesh, v, w):
    _, normal = _normal_matrices(mesh, v, w)
    scale = np.einsum("nii->n", normal) ** 3
    return np.abs(np.linalg.det(normal)) <= 1e-12 * scale


def recover_gradient(mesh: TriMesh, values, pairs=None) -> np.ndarray:
    """Nodal gradient by a linear least-squares fit over each vertex's triangle fan."""
    values = np.asarray(values, dtype=float)
    v, w = pairs if pairs is not None else _patch_pairs(mesh)
    nv = mesh.n_vertices
    basis, normal = _normal_matrices(mesh, v, w)
    vals = values[w]
    extra = vals.shape[1:] if vals.ndim > 1 else ()
    rhs = np.zeros((nv, 3) + extra)
    np.add.at(rhs, v, basis.reshape((-1, 3) + (1,) * len(extra)) * vals[:, None])
    scale = np.einsum("nii->n", normal) ** 3
    bad = np.abs(np.linalg.det(normal)) <= 1e-12 * scale
    if np.any(bad):
        raise HomogLabError(f"{bad.sum()} degenerate recovery patches")
    coef = np.linalg.solve(normal, rhs.reshape(nv, 3, -1))
    grad = coef[:, 1:, :]
    return grad[..., 0] if not extra else grad.reshape((nv, 2) + extra)


def recover_derivatives(mesh: TriMesh, values):
    """Recovered gradient ``(nv, 2)`` and symmetrised Hessian ``(nv, 3)`` as (H11, H12, H22)."""
    pairs = _patch_pairs(mesh)
    g = recover_gradient(mesh, values, pairs)
    gg = recover_gradient(mesh, g, pairs)  # (nv, 2 [derivative], 2 [component])
    H = np.column_stack([gg[:, 0, 0], 0.5 * (gg[:, 1, 0] + gg[:, 0, 1]), gg[:, 1, 1]])
    return g, H


# -- macro limit --------------------------------------------------------------

@dataclass
class MacroSolution:
    mesh: TriMesh
    u0: list
    grad: list
    hess: list
    picard: object = None

    def stacked(self) -> np.ndarray:
        """Nodal table ``(nv, 6 N)``: per species u0, g1, g2, H11, H12, H22."""
        cols = []
        for u, g, H in zip(self.u0, self.grad, self.hess):
            cols += [u[:, None], g, H]
        return np.hstack(cols)


def macro_operator_shift(cells: CellSolutions, reactions: ReactionSystem, i: int) -> float:
    """Zero-order coefficient kept implicit in the macro operator of species ``i``."""
    s = cells.species[i]
    c = -s.A + cells.Y1_measure * reactions.implicit_rate(i)
    if s.B >= 0:
        c += s.B
    return c


def solve_macro(cells: CellSolutions, reactions: ReactionSystem, sources, macro_mesh: TriMesh,
                picard: PicardConfig = PicardConfig(), tol=1e-10, max_iter=20000) -> MacroSolution:
    """Homogenized system on the macro mesh, then recovered first and second derivatives."""
    N = len(cells.species)
    geo = fem.p1_gradients(macro_mesh)
    M = fem.assemble_mass(macro_mesh, 1.0, geometry=geo)
    dirichlet = fem.Dirichlet.on_tag(macro_mesh, EdgeTag.EXTERIOR, 0.0)
    y1 = cells.Y1_measure
    reduced, loads = [], []
    for i, s in enumerate(cells.species):
        c = macro_operator_shift(cells, reactions, i)
        if c < 0:
            # Poincare bound on the unit square: lambda_min >= 2 pi^2 min eig(dhat)
            if -c >= 2 * np.pi**2 * np.linalg.eigvalsh(s.d_hat).min():
                raise CoercivityError(f"macro operator of species {i + 1} is not coercive (shift {c:.3g})")
        K = fem.assemble_stiffness(macro_mesh, s.d_hat, geometry=geo)
        system = fem.constrain(fem.SparseSystem((K + c * M).tocsr(), np.zeros(macro_mesh.n_vertices)), dirichlet)
        reduced.append(fem.ReducedSystem(system))
        f = sources[i]
        loads.append(y1 * fem.assemble_load(macro_mesh, f, geometry=geo) if f is not None else 0.0)

    def frozen(u):
        out = []
        for i, s in enumerate(cells.species):
            load = loads[i] + y1 * (M @ reactions.explicit_R(i, u))
            if s.B < 0:
                load = load - s.B * (M @ reactions.F(i, u[i]))
            elif not reactions.surface_linear:
                load = load + s.B * (M @ reactions.surface_remainder(i, u[i]))
            out.append(load)
        return out

    prev = [np.zeros(macro_mesh.n_vertices) for _ in range(N)]

    def apply(load, last):
        for i in range(N):
            prev[i], _ = reduced[i].solve(load[i], tol=tol, max_iter=max_iter, x0=prev[i])
        return [p.copy() for p in prev]

    result = picard_solve(apply, lambda u: frozen(np.array(u)), [np.zeros(macro_mesh.n_vertices)] * N, picard)
    grads, hess = [], []
    for u in result.fields:
        g, H = recover_derivatives(macro_mesh, u)
        grads.append(g)
        hess.append(H)
    return MacroSolution(macro_mesh, result.fields, grads, hess, result)


# -- expansion ------------------------------------------------------------------

class Expansion:
    """Truncated expansion ``u0 + sum_{k<=K} eps^k u_k + m^eps sum_{m>K} eps^m u_m``.

    ``values`` holds the nodal reconstruction on the fine mesh;
    ``gradient_at_quadrature`` evaluates the full gradient at quadrature
    points of a block of fine triangles, with y-derivatives taken from the
    cell-mesh element gradients of the provenance triangle.
    """

    def __init__(self, eps, fine_mesh: TriMesh, macro: MacroSolution, cells: CellSolutions,
                 reactions: ReactionSystem, sources, K: int = 0, M: int = 2, order: int = QUAD_ORDER):
        if M != 2:
            raise ValueError("only M = 2 is supported")
        if not 0 <= K <= M - 2:
            raise ValueError("need 0 <= K <= M - 2")
        if fine_mesh.tri_source is None or fine_mesh.vertex_source is None:
            raise HomogLabError("fine mesh carries no provenance")
        self.eps, self.mesh, self.macro, self.cells = float(eps), fine_mesh, macro, cells
        self.reactions, self.sources, self.K, self.M = reactions, sources, K, M
        self.N = len(cells.species)
        self.rule = fem.triangle_rule(order)
        self.cutoff = CutoffFunction(self.eps)
        self.locator = PointLocator(macro.mesh)
        self.table = macro.stacked()
        cm = cells.mesh
        _, cgrads = fem.p1_gradients(cm)
        lam = self.rule.points
        self._cell = []
        for s in cells.species:
            fields = np.concatenate([s.chi, s.theta.reshape(4, -1), s.w_R[None], s.w_a[None], s.w_b[None]])
            self._cell.append({
                "node": fields,  # (9, nv_cell)
                "quad": np.einsum("fta,qa->ftq", fields[:, cm.triangles], lam),
                "grad": np.einsum("fta,tad->ftd", fields[:, cm.triangles], cgrads),
            })
        self.values = self._nodal()

    def _macro_at(self, pts):
        return fem_interp(self.macro.mesh, self.table, pts, self.locator)

    def _production(self, x, u0s):
        out = []
        for i in range(self.N):
            f = self.sources[i]
            base = f(x) if f is not None else 0.0
            out.append(base + self.reactions.R(i, u0s))
        return out

    def _orders(self, i, cellv, mac, prod):
        """u1 and u2 from cell values ``cellv`` (9, ...) and macro values ``mac``."""
        u0, g, H = mac[0], mac[1:3], mac[3:6]
        Hm = np.stack([[H[0], H[1]], [H[1], H[2]]])
        u1 = -(cellv[0] * g[0] + cellv[1] * g[1])
        u2 = sum(cellv[2 + 2 * j + k] * Hm[j, k] for j in range(2) for k in range(2))
        u2 = u2 + cellv[6] * prod + cellv[7] * u0 + cellv[8] * self.reactions.F(i, u0)
        return u1, u2

    def _split(self, mac):
        return [mac[..., 6 * i:6 * i + 6] for i in range(self.N)]

    def _nodal(self):
        fm = self.mesh
        mac = self._macro_at(fm.vertices)
        parts = self._split(mac)
        u0s = np.stack([p[:, 0] for p in parts])
        prod = self._production(fm.vertices, u0s)
        m = self.cutoff(fm.vertices)
        eps = self.eps
        out = []
        for i in range(self.N):
            cellv = self._cell[i]["node"][:, fm.vertex_source]
            u1, u2 = self._orders(i, cellv, parts[i].T, prod[i])
            out.append(u0s[i] + m * (eps * u1 + eps**2 * u2))
        return out

    def gradient_at_quadrature(self, tris):
        """Gradient of every species at the quadrature points: ``(N, n, nq, 2)``."""
        return self.evaluate_block(tris)["grad"]

    def evaluate_block(self, tris) -> dict:
        """Quadrature-point data for a block of fine triangles.

        Returns ``grad`` (full expansion gradient), ``grad0`` (recovered
        gradient of u0) and ``u0``; gradients have shape ``(N, n, nq, 2)``.
        """
        fm, eps = self.mesh, self.eps
        tris = np.asarray(tris)
        x = fem.quadrature_points(fm, self.rule, tris)  # (n, q, 2)
        n, nq = x.shape[:2]
        flat = x.reshape(-1, 2)
        mac = self._macro_at(flat).reshape(n, nq, -1)
        parts = self._split(mac)
        u0s = np.stack([p[..., 0] for p in parts])
        prod = self._production(flat, u0s.reshape(self.N, -1))
        m, gm = self.cutoff.value_and_gradient(x)
        src = fm.tri_source[tris]
        out = np.empty((self.N, n, nq, 2))
        lead = np.empty((self.N, n, nq, 2))
        for i in range(self.N):
            p = np.moveaxis(parts[i], -1, 0)  # (6, n, q)
            u0, g, H = p[0], p[1:3], p[3:6]
            cq = self._cell[i]["quad"][:, src]  # (9, n, q)
            cg = self._cell[i]["grad"][:, src]  # (9, n, 2)
            P = prod[i].reshape(n, nq)
            u1, u2 = self._orders(i, cq, p, P)
            Fu = self.reactions.F(i, u0)
            # y-gradients (per unit y) of u1 and u2
            gy_u1 = -(cg[0][:, None, :] * g[0][..., None] + cg[1][:, None, :] * g[1][..., None])
            Hm = [[H[0], H[1]], [H[1], H[2]]]
            gy_u2 = sum(cg[2 + 2 * j + k][:, None, :] * Hm[j][k][..., None] for j in range(2) for k in range(2))
            gy_u2 = gy_u2 + cg[6][:, None, :] * P[..., None] + cg[7][:, None, :] * u0[..., None] \
                + cg[8][:, None, :] * Fu[..., None]
            # x-gradient of u1: -sum_j chi_j grad(d_j u0)
            gx_u1 = -np.stack([cq[0] * Hm[0][l] + cq[1] * Hm[1][l] for l in range(2)], axis=-1)
            higher = eps * u1 + eps**2 * u2
            inner = gy_u1 + eps * gx_u1 + eps * gy_u2
            lead[i] = np.moveaxis(g, 0, -1)
            out[i] = lead[i] + gm * higher[..., None] + m[..., None] * inner
        return {"grad": out, "grad0": lead, "u0": u0s}


def fem_interp(mesh, table, pts, locator):
    tri, bary = locator.locate(pts)
    if np.any(tri < 0):
        raise HomogLabError("expansion evaluated outside the macro mesh")
    return np.einsum("na,naf->nf", bary, table[mesh.triangles[tri]])


def reconstruct_expansion(eps, fine_mesh, macro, cells, reactions, sources, K=0, M=2) -> Expansion:
    return Expansion(eps, fine_mesh, macro, cells, reactions, sources, K=K, M=M)
