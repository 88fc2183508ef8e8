"""P1 finite elements: quadrature, assembly, constraints, PCG and norms.

Nodal fields are plain ``(n_vertices,)`` float arrays. Coefficients may be
given as a scalar, a constant 2x2 tensor (stiffness only), a callable of
points ``(k, 2) -> (k,)``, a nodal array, or an array of values already
sampled at the quadrature points ``(n_triangles, n_q)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from .errors import CoercivityError, ConstraintError, IndefiniteError, NonConvergenceError
from .mesh import EdgeTag, TriMesh


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points with weights normalised to the reference measure 1."""

    points: np.ndarray
    weights: np.ndarray
    order: int


def _sym3(a, w):
    b = 1.0 - 2.0 * a
    return [[a, a, b], [a, b, a], [b, a, a]], [w] * 3


def triangle_rule(order: int = 2) -> QuadratureRule:
    if order == 1:
        pts, wts = [[1 / 3, 1 / 3, 1 / 3]], [1.0]
    elif order == 2:
        pts, wts = _sym3(1 / 6, 1 / 3)
    elif order == 4:
        p1, w1 = _sym3(0.445948490915965, 0.223381589678011)
        p2, w2 = _sym3(0.091576213509771, 0.109951743655322)
        pts, wts = p1 + p2, w1 + w2
    else:
        raise ValueError(f"no triangle rule of order {order}")
    return QuadratureRule(np.array(pts), np.array(wts), order)


def edge_rule(n_points: int = 2) -> QuadratureRule:
    """Gauss rule on an edge; points are (1 - s, s) pairs."""
    if n_points not in (2, 3):
        raise ValueError("edge rules have 2 or 3 Gauss points")
    s, w = np.polynomial.legendre.leggauss(n_points)
    s = 0.5 * (s + 1.0)
    return QuadratureRule(np.column_stack([1.0 - s, s]), 0.5 * w, 2 * n_points - 1)


def p1_gradients(mesh: TriMesh):
    """Triangle areas and constant basis gradients ``(nt, 3, 2)``."""
    p = mesh.vertices[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    # rows of inv(J)^T give gradients of barycentric coordinates 1 and 2
    g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    return 0.5 * det, grads


def element_gradients(mesh: TriMesh, values, grads=None) -> np.ndarray:
    """Constant gradient of a P1 field on each triangle, ``(nt, 2)``."""
    if grads is None:
        _, grads = p1_gradients(mesh)
    return np.einsum("tk,tkd->td", np.asarray(values)[mesh.triangles], grads)


def quadrature_points(mesh: TriMesh, rule: QuadratureRule, tris=None) -> np.ndarray:
    t = mesh.triangles if tris is None else mesh.triangles[tris]
    return np.einsum("qk,tkd->tqd", rule.points, mesh.vertices[t])


Coefficient = Union[float, np.ndarray, Callable]


def sample_coefficient(mesh: TriMesh, coef: Coefficient, rule: QuadratureRule) -> np.ndarray:
    """Coefficient values at the quadrature points, ``(nt, nq)``."""
    nt, nq = mesh.n_triangles, len(rule.weights)
    if callable(coef):
        x = quadrature_points(mesh, rule)
        return np.asarray(coef(x.reshape(-1, 2)), dtype=float).reshape(nt, nq)
    c = np.asarray(coef, dtype=float)
    if c.ndim == 0:
        return np.full((nt, nq), float(c))
    if c.shape == (mesh.n_vertices,):
        return c[mesh.triangles] @ rule.points.T
    if c.shape == (nt, nq):
        return c
    raise ValueError(f"cannot interpret coefficient of shape {c.shape}")


def _coo(mesh_tris, local, n):
    k = mesh_tris.shape[1]
    rows = np.repeat(mesh_tris, k, axis=1).ravel()
    cols = np.tile(mesh_tris, (1, k)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_stiffness(mesh: TriMesh, coef: Coefficient = 1.0, order: int = 2,
                       geometry=None) -> sp.csr_matrix:
    """``A[a, b] = sum_T int_T coef grad(phi_a) . grad(phi_b)``."""
    areas, grads = geometry if geometry is not None else p1_gradients(mesh)
    c = np.asarray(coef, dtype=float) if not callable(coef) else None
    if c is not None and c.shape == (2, 2):
        if not np.allclose(c, c.T) or np.linalg.eigvalsh(0.5 * (c + c.T)).min() <= 0:
            raise CoercivityError("tensor coefficient is not symmetric positive definite")
        local = areas[:, None, None] * np.einsum("tad,de,tbe->tab", grads, c, grads)
        return _coo(mesh.triangles, local, mesh.n_vertices)
    rule = triangle_rule(order)
    vals = sample_coefficient(mesh, coef, rule)
    if np.any(~(vals > 0)):
        raise CoercivityError("diffusion coefficient is not strictly positive on the mesh")
    cbar = areas * (vals @ rule.weights)
    local = cbar[:, None, None] * np.einsum("tad,tbd->tab", grads, grads)
    return _coo(mesh.triangles, local, mesh.n_vertices)


def assemble_mass(mesh: TriMesh, weight: Coefficient = 1.0, order: int = 2,
                  geometry=None) -> sp.csr_matrix:
    """``M[a, b] = sum_T int_T weight phi_a phi_b``."""
    areas = geometry[0] if geometry is not None else mesh.signed_areas()
    rule = triangle_rule(order)
    vals = sample_coefficient(mesh, weight, rule)
    lam = rule.points
    # sum_q w_q c_q lam_qa lam_qb
    local = np.einsum("tq,q,qa,qb->tab", vals, rule.weights, lam, lam) * areas[:, None, None]
    return _coo(mesh.triangles, local, mesh.n_vertices)


def assemble_load(mesh: TriMesh, f: Coefficient, order: int = 2, geometry=None) -> np.ndarray:
    """``b[a] = int f phi_a``."""
    areas = geometry[0] if geometry is not None else mesh.signed_areas()
    rule = triangle_rule(order)
    vals = sample_coefficient(mesh, f, rule)
    local = (vals * rule.weights) @ rule.points * areas[:, None]
    return np.bincount(mesh.triangles.ravel(), local.ravel(), minlength=mesh.n_vertices)


def _edge_samples(mesh, edges, weight, rule):
    p = mesh.vertices[edges]
    if callable(weight):
        x = np.einsum("qk,ekd->eqd", rule.points, p)
        return np.asarray(weight(x.reshape(-1, 2)), dtype=float).reshape(len(edges), len(rule.weights))
    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        return np.full((len(edges), len(rule.weights)), float(w))
    if w.shape == (mesh.n_vertices,):
        return w[edges] @ rule.points.T
    if w.shape == (len(edges), len(rule.weights)):
        return w
    raise ValueError(f"cannot interpret edge weight of shape {w.shape}")


def _check_tag(tag):
    try:
        return EdgeTag(tag)
    except ValueError:
        raise ValueError(f"unknown edge tag {tag!r}") from None


def assemble_boundary_mass(mesh: TriMesh, tag, weight: Coefficient = 1.0,
                           n_points: int = 2) -> sp.csr_matrix:
    """``S[a, b] = sum over tagged edges of int_e weight phi_a phi_b``."""
    edges = mesh.tagged_edges(_check_tag(tag))
    rule = edge_rule(n_points)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
    vals = _edge_samples(mesh, edges, weight, rule)
    lam = rule.points
    local = np.einsum("eq,q,qa,qb->eab", vals, rule.weights, lam, lam) * lengths[:, None, None]
    return _coo(edges, local, mesh.n_vertices)


def assemble_boundary_load(mesh: TriMesh, tag, g: Coefficient, n_points: int = 2) -> np.ndarray:
    """``b[a] = sum over tagged edges of int_e g phi_a``."""
    edges = mesh.tagged_edges(_check_tag(tag))
    rule = edge_rule(n_points)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]], axis=1)
    vals = _edge_samples(mesh, edges, g, rule)
    local = (vals * rule.weights) @ rule.points * lengths[:, None]
    return np.bincount(edges.ravel(), local.ravel(), minlength=mesh.n_vertices)


# -- constraints ------------------------------------------------------------

@dataclass(frozen=True)
class Dirichlet:
    dofs: np.ndarray
    values: np.ndarray

    @classmethod
    def on_tag(cls, mesh: TriMesh, tag, value=0.0):
        dofs = mesh.boundary_vertices(_check_tag(tag))
        if callable(value):
            vals = np.asarray(value(mesh.vertices[dofs]), dtype=float)
        else:
            vals = np.full(len(dofs), float(value))
        return cls(dofs, vals)


@dataclass(frozen=True)
class Periodic:
    pairs: np.ndarray  # (k, 2) master, slave

    @classmethod
    def from_mesh(cls, mesh: TriMesh):
        return cls(mesh.periodic_pairs())


@dataclass(frozen=True)
class ZeroMean:
    """Fix the additive constant through ``sum_a weights[a] u[a] = 0``."""

    weights: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: TriMesh):
        return cls(assemble_load(mesh, 1.0, order=1))


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    constraints: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def constrain(system: SparseSystem, constraint) -> SparseSystem:
    """Return a copy of ``system`` carrying one more constraint record."""
    n = system.size
    fixed = set()
    linked = set()
    for c in system.constraints:
        if isinstance(c, Dirichlet):
            fixed.update(c.dofs.tolist())
        elif isinstance(c, Periodic):
            linked.update(c.pairs.ravel().tolist())
    if isinstance(constraint, Dirichlet):
        d = constraint.dofs
        if len(d) and (d.min() < 0 or d.max() >= n):
            raise ConstraintError("Dirichlet dof outside the system")
        if len(np.unique(d)) != len(d) or fixed.intersection(d.tolist()) or linked.intersection(d.tolist()):
            raise ConstraintError("conflicting constraints on a Dirichlet dof")
    elif isinstance(constraint, Periodic):
        pr = constraint.pairs
        if len(pr) and (pr.min() < 0 or pr.max() >= n):
            raise ConstraintError("periodic pair outside the system")
        if len(np.unique(pr[:, 1])) != len(pr) or np.intersect1d(pr[:, 0], pr[:, 1]).size:
            raise ConstraintError("periodic slaves must be distinct and never masters")
        if fixed.intersection(pr.ravel().tolist()):
            raise ConstraintError("conflicting constraints: periodic dof is also Dirichlet")
    elif isinstance(constraint, ZeroMean):
        if fixed or any(isinstance(c, ZeroMean) for c in system.constraints):
            raise ConstraintError("zero-mean conflicts with existing constraints")
        if len(constraint.weights) != n:
            raise ConstraintError("zero-mean weights have the wrong length")
    else:
        raise ConstraintError(f"unknown constraint {constraint!r}")
    return replace(system, constraints=[*system.constraints, constraint])


@dataclass
class CGInfo:
    iterations: int
    residual: float


def _rowdot(X, Y):
    return np.array([np.dot(x, y) for x, y in zip(X, Y)])


def pcg(A, b, x0=None, tol=1e-10, max_iter=10000, project=None) -> tuple[np.ndarray, CGInfo]:
    """Jacobi-preconditioned conjugate gradients.

    ``b`` may be a vector or an ``(n, k)`` block; block columns run
    independent CG recurrences in lockstep. A column stops at
    ``|r| <= tol |b|``. ``project`` (optional) is applied to each
    preconditioned residual to keep iterates out of a known kernel.
    """
    b = np.asarray(b, dtype=float)
    vector = b.ndim == 1
    B = np.ascontiguousarray(b[None, :] if vector else b.T)  # (k, n): one sparse product per row
    diag = A.diagonal()
    if np.any(~(diag > 0)):
        raise IndefiniteError("matrix has a non-positive diagonal entry")
    dinv = 1.0 / diag
    k_cols = len(B)

    def matmul(P, out):
        for j in range(k_cols):
            out[j] = A @ P[j]
        return out

    def precondition(R, out):
        np.multiply(dinv, R, out=out)
        if project is not None:
            for j in range(k_cols):
                out[j] = project(out[j])
        return out

    bnorm = np.sqrt(_rowdot(B, B))
    AP = np.empty_like(B)
    tmp = np.empty_like(B)
    if x0 is None:
        X = np.zeros_like(B)
        R = B.copy()
    else:
        X = np.ascontiguousarray(np.asarray(x0, dtype=float).reshape(b.shape).T.reshape(k_cols, -1))
        X[bnorm == 0.0] = 0.0
        R = B - matmul(X, AP)
    R[bnorm == 0.0] = 0.0
    scale = np.where(bnorm > 0, bnorm, 1.0)
    rnorm = np.sqrt(_rowdot(R, R))
    active = rnorm > tol * bnorm
    iters = 0

    def done():
        x = X[0] if vector else X.T.copy()
        return x, CGInfo(iters, float(np.max(rnorm / scale)))

    if not active.any():
        return done()
    Z = precondition(R, np.empty_like(B))
    P = Z.copy()
    rz = _rowdot(R, Z)
    for k in range(1, max_iter + 1):
        iters = k
        matmul(P, AP)
        pAp = _rowdot(P, AP)
        if np.any(~(pAp[active] > 0.0)):
            raise IndefiniteError(f"non-positive curvature {pAp[active].min():.3e} at CG iteration {k}")
        alpha = np.where(active, rz / np.where(active, pAp, 1.0), 0.0)[:, None]
        X += np.multiply(alpha, P, out=tmp)
        R -= np.multiply(alpha, AP, out=tmp)
        rnorm = np.sqrt(_rowdot(R, R))
        if not np.all(np.isfinite(rnorm)):
            raise NonConvergenceError("CG produced a non-finite residual", residual=float(np.max(rnorm)))
        active &= rnorm > tol * bnorm
        if not active.any():
            return done()
        precondition(R, Z)
        rz_new = _rowdot(R, Z)
        beta = np.where(active, rz_new / np.where(active, rz, 1.0), 0.0)
        P *= beta[:, None]
        P += Z
        P[~active] = 0.0
        rz = rz_new
    raise NonConvergenceError(
        f"CG did not reach tol={tol:g} in {max_iter} iterations", residual=float(np.max(rnorm / scale)))


class ReducedSystem:
    """Constraint elimination prepared once, reusable for many right-hand sides."""

    def __init__(self, system: SparseSystem):
        n = system.size
        A = sp.csr_matrix(system.matrix)
        self.n = n
        self.u_fixed = np.zeros(n)
        fixed = np.zeros(n, bool)
        master = np.arange(n)
        self.zero_mean = None
        for c in system.constraints:
            if isinstance(c, Dirichlet):
                fixed[c.dofs] = True
                self.u_fixed[c.dofs] = c.values
            elif isinstance(c, Periodic):
                master[c.pairs[:, 1]] = c.pairs[:, 0]
            elif isinstance(c, ZeroMean):
                self.zero_mean = np.asarray(c.weights, dtype=float)
        keep = ~fixed & (master == np.arange(n))
        self.free = np.flatnonzero(keep)
        index = np.full(n, -1)
        index[self.free] = np.arange(len(self.free))
        self.column = index[master]
        if np.all(master == np.arange(n)):
            self.P = None
            self.A = A[self.free][:, self.free].tocsr()
            self.A_fix = A[self.free] if fixed.any() else None
        else:
            rows = np.flatnonzero(self.column >= 0)
            self.P = sp.csr_matrix((np.ones(len(rows)), (rows, self.column[rows])),
                                   shape=(n, len(self.free)))
            self.A = (self.P.T @ A @ self.P).tocsr()
            self.A_fix = (self.P.T @ A) if fixed.any() else None
        self.A.sort_indices()
        if self.zero_mean is not None:
            self.w = self.P.T @ self.zero_mean if self.P is not None else self.zero_mean[self.free]

    def reduce_rhs(self, rhs):
        b = self.P.T @ rhs if self.P is not None else rhs[self.free]
        if self.A_fix is not None:
            shift = self.A_fix @ self.u_fixed
            b = b - (shift if b.ndim == 1 else shift[:, None])
        return b

    def expand(self, x):
        out = self.u_fixed.copy() if x.ndim == 1 else np.repeat(self.u_fixed[:, None], x.shape[1], axis=1)
        mask = self.column >= 0
        out[mask] = x[self.column[mask]]
        return out

    def solve(self, rhs, tol=1e-10, max_iter=10000, x0=None):
        """Solve for one right-hand side or an ``(n, k)`` block of them."""
        b = self.reduce_rhs(np.asarray(rhs, dtype=float))
        project = None
        if self.zero_mean is not None:
            # kernel is the constants: keep the load and the search space orthogonal
            b = b - b.mean(axis=0)
            project = lambda z: z - z.mean()  # noqa: E731
        x0r = None if x0 is None else np.asarray(x0, dtype=float)[self.free]
        x, info = pcg(self.A, b, x0=x0r, tol=tol, max_iter=max_iter, project=project)
        if self.zero_mean is not None:
            x = x - (self.w @ x) / self.w.sum()
        return self.expand(x), info


def solve_spd(system: SparseSystem, tol: float = 1e-10, max_iter: int = 10000, x0=None):
    """Solve a constrained SPD system; returns the full nodal vector and CG info."""
    return ReducedSystem(system).solve(system.rhs, tol=tol, max_iter=max_iter, x0=x0)


# -- norms ------------------------------------------------------------------

class NormKind(str, enum.Enum):
    L2 = "L2"
    H1_SEMI = "H1_SEMI"
    LINF = "LINF"


def norm(mesh: TriMesh, values, kind="L2") -> float:
    kind = NormKind(kind)
    values = np.asarray(values, dtype=float)
    if kind is NormKind.LINF:
        return float(np.abs(values).max(initial=0.0))
    areas, grads = p1_gradients(mesh)
    if kind is NormKind.H1_SEMI:
        g = element_gradients(mesh, values, grads)
        return float(np.sqrt(np.sum(areas * np.einsum("td,td->t", g, g))))
    rule = triangle_rule(2)
    vq = values[mesh.triangles] @ rule.points.T
    return float(np.sqrt(np.sum(areas * ((vq * vq) @ rule.weights))))
