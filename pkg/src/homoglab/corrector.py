"""Micro solves, corrector norms, rate fits and study reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fem
from .errors import CoercivityError, HomogLabError
from .geometry import CutoffFunction, PerforatedDomainGeometry, wrap_to_cell
from .homogenize import CellSolutions, Expansion, MacroSolution, solve_cells, solve_macro
from .mesh import EdgeTag, TriMesh, build_unit_cell_mesh, structured_square_mesh, tile_perforated_mesh
from .nonlinear import PicardConfig, PicardResult, picard_solve

log = logging.getLogger(__name__)

CSV_COLUMNS = ["eps", "h", "species", "corrector_Vnorm", "l2_err_u0", "cutoff_ratio_l2",
               "cutoff_ratio_grad", "picard_iters", "wall_ms"]
FORMATS = ("csv", "json", "plotdata")
CHUNK = 60_000


# -- micro problem ------------------------------------------------------------

@dataclass
class MicroSolution:
    eps: float
    mesh: TriMesh
    fields: list
    picard: PicardResult
    cg_iterations: int = 0


def _cell_samples(cell_mesh, coef, rule):
    return fem.sample_coefficient(cell_mesh, coef, rule)


def _periodic_coef(coef, eps):
    return lambda x: coef(wrap_to_cell(x, eps)[1])


def solve_micro(eps, spec, fine_mesh: TriMesh, picard: PicardConfig | None = None, cell_mesh: TriMesh | None = None,
                tol: float | None = None, max_iter: int | None = None, initial=None) -> MicroSolution:
    """Fine-scale solution on the perforated domain for every species.

    Volume coefficients are sampled on the cell mesh and copied to each fine
    triangle through its provenance; Robin data are evaluated at the wrapped
    edge quadrature points. Species sharing an operator are solved as one
    block. Inner CG tolerances follow the Picard update (never looser than
    1e-2 times the last update, never tighter than ``tol``). ``initial``
    (nodal fields, e.g. the two-scale reconstruction) starts the iteration.
    """
    picard = picard or spec.picard
    tol = spec.cg_tol if tol is None else tol
    max_iter = spec.cg_max_iter if max_iter is None else max_iter
    if fine_mesh.tri_source is None or fine_mesh.epsilon is None or abs(fine_mesh.epsilon - eps) > 1e-12:
        raise HomogLabError(f"fine mesh was not tiled at eps={eps}")
    N = spec.n_species
    reactions = spec.reactions
    if not spec.raw.get("allow_positive_a", False):
        for i, a in enumerate(spec.deposition_a):
            if a.bounds[1] > 0:
                raise CoercivityError(f"a_{i + 1} is positive; the micro operator may not be coercive")
    if cell_mesh is None:
        cell_mesh = build_unit_cell_mesh(spec.cell, spec.cell_h)
    rule = fem.triangle_rule(2)
    geo = fem.p1_gradients(fine_mesh)
    mass = fem.assemble_mass(fine_mesh, 1.0, geometry=geo)
    nv = fine_mesh.n_vertices
    dirichlet = fem.Dirichlet.on_tag(fine_mesh, EdgeTag.EXTERIOR, 0.0)

    # b >= 0 keeps the linearised surface term in the operator
    implicit_b = [b.bounds[0] >= 0 if hasattr(b, "bounds") else False for b in spec.deposition_b]
    groups: dict = {}
    order = []
    for i in range(N):
        c = reactions.implicit_rate(i)
        key = (repr(spec.diffusion[i]), repr(spec.deposition_a[i]),
               repr(spec.deposition_b[i]) if implicit_b[i] else None, c)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(i)

    solvers = {}
    for key in order:
        i = groups[key][0]
        d_fine = _cell_samples(cell_mesh, spec.diffusion[i], rule)[fine_mesh.tri_source]
        K = fem.assemble_stiffness(fine_mesh, d_fine, geometry=geo)
        a, b = spec.deposition_a[i], spec.deposition_b[i]
        if implicit_b[i]:
            robin = lambda y, a=a, b=b: b(y) - a(y)  # noqa: E731
        else:
            robin = lambda y, a=a: -a(y)  # noqa: E731
        S = fem.assemble_boundary_mass(fine_mesh, EdgeTag.HOLE, _periodic_coef(robin, eps), n_points=3)
        A = (K + eps * S + key[3] * mass).tocsr()
        solvers[key] = fem.ReducedSystem(fem.constrain(fem.SparseSystem(A, np.zeros(nv)), dirichlet))
        del K, S, A

    loads = [fem.assemble_load(fine_mesh, f, geometry=geo) for f in spec.sources]
    surf_b = {}
    for i, b in enumerate(spec.deposition_b):
        if not implicit_b[i] or not reactions.surface_linear:
            surf_b[i] = eps * fem.assemble_boundary_mass(fine_mesh, EdgeTag.HOLE, _periodic_coef(b, eps), n_points=3)

    def frozen(u):
        out = []
        for i in range(N):
            load = loads[i] + mass @ reactions.explicit_R(i, u)
            if i in surf_b:
                if implicit_b[i]:
                    load = load + surf_b[i] @ reactions.surface_remainder(i, u[i])
                else:
                    load = load - surf_b[i] @ reactions.F(i, u[i])
            out.append(load)
        return out

    if initial is None:
        start = [np.zeros(nv) for _ in range(N)]
        first_tol = 1e-3
    else:
        start = [np.where(np.isin(np.arange(nv), dirichlet.dofs), 0.0, np.asarray(f, dtype=float)) for f in initial]
        first_tol = 1e-5
    state = {key: np.column_stack([start[i] for i in groups[key]]) for key in order}
    iters = [0]

    def apply(load, last):
        inner = max(tol, 1e-2 * last) if last is not None else max(tol, first_tol)
        if last == 0.0:
            inner = tol
        result = [None] * N
        for key in order:
            idx = groups[key]
            rhs = np.column_stack([load[i] for i in idx])
            x, info = solvers[key].solve(rhs, tol=inner, max_iter=max_iter, x0=state[key])
            state[key] = x
            iters[0] += info.iterations
            for col, i in enumerate(idx):
                result[i] = x[:, col].copy()
        return result

    res = picard_solve(apply, lambda u: frozen(np.asarray(u)), start, picard)
    log.info("micro eps=%g: %d Picard steps, %d CG iterations", eps, res.iterations, iters[0])
    return MicroSolution(float(eps), fine_mesh, res.fields, res, iters[0])


# -- norms ----------------------------------------------------------------------

class NodalReconstruction:
    """A plain nodal field on the fine mesh, treated as a reconstruction."""

    def __init__(self, mesh: TriMesh, values, eps=None, order: int = 2):
        self.mesh, self.eps = mesh, eps
        self.values = [np.asarray(v, dtype=float) for v in values]
        self.rule = fem.triangle_rule(order)

    def gradient_at_quadrature(self, tris):
        _, grads = fem.p1_gradients(_submesh(self.mesh, tris))
        nq = len(self.rule.weights)
        out = []
        for v in self.values:
            g = np.einsum("ta,tad->td", v[self.mesh.triangles[tris]], grads)
            out.append(np.repeat(g[:, None, :], nq, axis=1))
        return np.stack(out)


def _submesh(mesh, tris):
    return TriMesh(mesh.vertices, mesh.triangles[tris], np.zeros((0, 2), int), np.zeros(0, int))


def _chunks(n, size=CHUNK):
    for s in range(0, n, size):
        yield np.arange(s, min(n, s + size))


def _check_match(eps, fields, reconstruction, mesh):
    if getattr(reconstruction, "mesh", mesh) is not mesh:
        rm = reconstruction.mesh
        if rm.n_vertices != mesh.n_vertices or rm.n_triangles != mesh.n_triangles \
                or not np.array_equal(rm.triangles, mesh.triangles):
            raise HomogLabError("reconstruction was built on a different mesh")
    r_eps = getattr(reconstruction, "eps", None)
    if r_eps is not None and abs(r_eps - eps) > 1e-12:
        raise HomogLabError(f"reconstruction was built at eps={r_eps}, not {eps}")
    for f in fields:
        if len(f) != mesh.n_vertices:
            raise HomogLabError("field length does not match the mesh")


def corrector_norm(eps, u_eps, reconstruction, fine_mesh: TriMesh):
    """``(per-species V-norms of u_eps - reconstruction, root-sum-of-squares)``.

    ``reconstruction`` is an :class:`Expansion`, a :class:`NodalReconstruction`
    or a sequence of nodal arrays.
    """
    if not hasattr(reconstruction, "gradient_at_quadrature"):
        reconstruction = NodalReconstruction(fine_mesh, reconstruction, eps)
    _check_match(eps, u_eps, reconstruction, fine_mesh)
    w = reconstruction.rule.weights
    N = len(u_eps)
    sq = np.zeros(N)
    for tris in _chunks(fine_mesh.n_triangles):
        areas, grads = fem.p1_gradients(_submesh(fine_mesh, tris))
        G = reconstruction.gradient_at_quadrature(tris)
        for i in range(N):
            gu = np.einsum("ta,tad->td", u_eps[i][fine_mesh.triangles[tris]], grads)
            diff = gu[:, None, :] - G[i]
            sq[i] += np.sum(areas * (np.einsum("tqd,tqd->tq", diff, diff) @ w))
    norms = np.sqrt(sq)
    return norms, float(np.sqrt(np.sum(sq)))


def _expansion_errors(eps, u_eps, expansion: Expansion, mesh: TriMesh):
    """Corrector norms, naive ``|u - u0|_V`` and ``|u - u0|_L2`` in one pass."""
    w = expansion.rule.weights
    lam = expansion.rule.points
    N = len(u_eps)
    corr, naive, l2 = np.zeros(N), np.zeros(N), np.zeros(N)
    for tris in _chunks(mesh.n_triangles):
        areas, grads = fem.p1_gradients(_submesh(mesh, tris))
        blk = expansion.evaluate_block(tris)
        for i in range(N):
            loc = u_eps[i][mesh.triangles[tris]]
            gu = np.einsum("ta,tad->td", loc, grads)[:, None, :]
            d1 = gu - blk["grad"][i]
            d0 = gu - blk["grad0"][i]
            dv = loc @ lam.T - blk["u0"][i]
            corr[i] += np.sum(areas * (np.einsum("tqd,tqd->tq", d1, d1) @ w))
            naive[i] += np.sum(areas * (np.einsum("tqd,tqd->tq", d0, d0) @ w))
            l2[i] += np.sum(areas * ((dv * dv) @ w))
    return np.sqrt(corr), np.sqrt(naive), np.sqrt(l2)


# -- cut-off diagnostics ----------------------------------------------------------

def cutoff_ratios(eps, mesh: TriMesh | None = None, order: int = 4, per_eps: int = 8):
    """``(|1 - m|_L2 / eps^1/2, eps |grad m|_L2 / eps^1/2)``.

    Integrates over the triangles of ``mesh`` when given (the perforated
    domain), otherwise over the whole unit square with tensor Gauss rules on
    squares of side ``eps / per_eps``.
    """
    cut = CutoffFunction(eps)
    one, grad = 0.0, 0.0
    if mesh is not None:
        rule = fem.triangle_rule(order)
        for tris in _chunks(mesh.n_triangles, 4 * CHUNK):
            x = fem.quadrature_points(mesh, rule, tris)
            areas = fem.p1_gradients(_submesh(mesh, tris))[0]
            m, g = cut.value_and_gradient(x)
            one += np.sum(areas * (((1 - m) ** 2) @ rule.weights))
            grad += np.sum(areas * (np.einsum("tqd,tqd->tq", g, g) @ rule.weights))
    else:
        n = int(round(per_eps / eps))
        gx, gw = np.polynomial.legendre.leggauss(order)
        h = 1.0 / n
        pts = ((np.arange(n)[:, None] + 0.5 * (gx[None, :] + 1)) * h).ravel()
        wts = np.tile(gw * h / 2, n)
        for s in range(0, len(pts), 4096):
            X, Y = np.meshgrid(pts[s:s + 4096], pts, indexing="ij")
            W = np.outer(wts[s:s + 4096], wts)
            m, g = cut.value_and_gradient(np.stack([X, Y], axis=-1))
            one += np.sum(W * (1 - m) ** 2)
            grad += np.sum(W * np.einsum("...d,...d->...", g, g))
    root = math.sqrt(eps)
    return math.sqrt(one) / root, eps * math.sqrt(grad) / root


# -- rate fit ------------------------------------------------------------------------

def fit_rate(eps_list, errors):
    """Least-squares line through ``(log eps, log error)``: ``(slope, intercept, R^2)``."""
    x = np.log(np.asarray(eps_list, dtype=float))
    e = np.asarray(errors, dtype=float)
    if len(x) != len(e):
        raise ValueError("eps_list and errors differ in length")
    if len(x) < 3:
        raise ValueError("a rate fit needs at least three points")
    if not np.all(e > 0):
        raise ValueError("errors must be strictly positive")
    y = np.log(e)
    xc, yc = x - x.mean(), y - y.mean()
    slope = float(np.sum(xc * yc) / np.sum(xc * xc))
    intercept = float(y.mean() - slope * x.mean())
    ss_res = float(np.sum((y - (intercept + slope * x)) ** 2))
    ss_tot = float(np.sum(yc * yc))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, intercept, r2


# -- study ------------------------------------------------------------------------------

@dataclass
class EpsResult:
    eps: float
    h: float = math.nan
    corrector_norms: list = field(default_factory=list)
    aggregate: float = math.nan
    naive_norms: list = field(default_factory=list)
    naive_aggregate: float = math.nan
    l2_err_u0: list = field(default_factory=list)
    linf: list = field(default_factory=list)
    cutoff_ratio_l2: float = math.nan
    cutoff_ratio_grad: float = math.nan
    picard_iters: int = 0
    cg_iters: int = 0
    wall_ms: float = 0.0
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ConvergenceReport:
    rows: list
    n_species: int
    fits: dict = field(default_factory=dict)
    cell: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def slope(self):
        f = self.fits.get("aggregate")
        return None if f is None else f["slope"]

    def to_dict(self) -> dict:
        return {"n_species": self.n_species, "rows": [asdict(r) for r in self.rows], "fits": self.fits,
                "cell": self.cell, "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvergenceReport":
        return cls([EpsResult(**r) for r in d["rows"]], d["n_species"], d.get("fits", {}),
                   d.get("cell", {}), d.get("config", {}))


def _fit_dict(eps, values):
    try:
        s, i, r2 = fit_rate(eps, values)
    except ValueError:
        return None
    return {"slope": s, "intercept": i, "r2": r2}


def compute_fits(rows, n_species) -> dict:
    good = [r for r in rows if r.ok]
    eps = [r.eps for r in good]
    fits = {"aggregate": _fit_dict(eps, [r.aggregate for r in good]),
            "naive_aggregate": _fit_dict(eps, [r.naive_aggregate for r in good])}
    for i in range(n_species):
        fits[f"species{i + 1}"] = _fit_dict(eps, [r.corrector_norms[i] for r in good])
        fits[f"l2_err_u0_species{i + 1}"] = _fit_dict(eps, [r.l2_err_u0[i] for r in good])
    fits["l2_err_u0"] = _fit_dict(eps, [math.sqrt(sum(v * v for v in r.l2_err_u0)) for r in good])
    return fits


@dataclass
class SharedStage:
    cell_mesh: TriMesh
    cells: CellSolutions
    macro: MacroSolution


def shared_stage(spec) -> SharedStage:
    """Cell solves and the macro limit, common to every eps of a study."""
    t = time.perf_counter()
    cell_mesh = build_unit_cell_mesh(spec.cell, spec.cell_h)
    cells = solve_cells(cell_mesh, spec.diffusion, spec.deposition_a, spec.deposition_b,
                        tol=spec.cg_tol, max_iter=spec.cg_max_iter)
    log.info("cell stage: %d vertices, %.2f s", cell_mesh.n_vertices, time.perf_counter() - t)
    t = time.perf_counter()
    macro_mesh = structured_square_mesh(spec.macro_n)
    macro = solve_macro(cells, spec.reactions, spec.sources, macro_mesh, spec.picard,
                        tol=spec.cg_tol, max_iter=spec.cg_max_iter)
    log.info("macro stage: %d vertices, %d Picard steps, %.2f s", macro_mesh.n_vertices,
             macro.picard.iterations, time.perf_counter() - t)
    return SharedStage(cell_mesh, cells, macro)


def run_eps(eps, spec, shared: SharedStage) -> EpsResult:
    """Pipeline for one eps; failures are recorded in ``status``."""
    t0 = time.perf_counter()
    row = EpsResult(float(eps))
    try:
        PerforatedDomainGeometry(spec.cell, eps)
        fine = tile_perforated_mesh(shared.cell_mesh, eps)
        row.h = float(eps * shared.cell_mesh.max_edge_length())
        t = time.perf_counter()
        exp = Expansion(eps, fine, shared.macro, shared.cells, spec.reactions, spec.sources, K=spec.K, M=spec.M)
        micro = solve_micro(eps, spec, fine, spec.picard, cell_mesh=shared.cell_mesh, initial=exp.values)
        log.info("eps=%g: micro solve on %d vertices, %.2f s", eps, fine.n_vertices, time.perf_counter() - t)
        t = time.perf_counter()
        corr, naive, l2 = _expansion_errors(eps, micro.fields, exp, fine)
        log.info("eps=%g: reconstruction and norms, %.2f s", eps, time.perf_counter() - t)
        row.corrector_norms = corr.tolist()
        row.aggregate = float(np.sqrt(np.sum(corr**2)))
        row.naive_norms = naive.tolist()
        row.naive_aggregate = float(np.sqrt(np.sum(naive**2)))
        row.l2_err_u0 = l2.tolist()
        row.linf = [float(np.abs(u).max()) for u in micro.fields]
        row.cutoff_ratio_l2, row.cutoff_ratio_grad = cutoff_ratios(eps, fine, order=2)
        row.picard_iters = micro.picard.iterations
        row.cg_iters = micro.cg_iterations
    except (HomogLabError, ValueError, FloatingPointError, MemoryError) as exc:
        log.error("eps=%g failed: %s", eps, exc)
        row.status = f"{type(exc).__name__}: {exc}"
    row.wall_ms = (time.perf_counter() - t0) * 1e3
    return row


def run_study(spec, threads: int = 1, shared: SharedStage | None = None) -> ConvergenceReport:
    """Full corrector study over ``spec.eps_list``; rows are ordered like the list."""
    shared = shared or shared_stage(spec)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda e: run_eps(e, spec, shared), spec.eps_list))
    else:
        rows = [run_eps(e, spec, shared) for e in spec.eps_list]
    cell = {f"species{i + 1}": {"d_hat": s.d_hat.tolist(), "A": s.A, "B": s.B}
            for i, s in enumerate(shared.cells.species)}
    cell["Y1_measure"] = shared.cells.Y1_measure
    report = ConvergenceReport(rows, spec.n_species, compute_fits(rows, spec.n_species), cell, spec.raw)
    f = report.fits["aggregate"]
    if f is not None:
        log.info("aggregate corrector slope %.3f (R^2 %.4f)", f["slope"], f["r2"])
    return report


# -- reports -------------------------------------------------------------------------------

def _num(v) -> str:
    return repr(float(v))


def csv_rows(report: ConvergenceReport):
    for r in report.rows:
        for i in range(report.n_species):
            vn = r.corrector_norms[i] if r.ok else math.nan
            l2 = r.l2_err_u0[i] if r.ok else math.nan
            yield [_num(r.eps), _num(r.h), str(i + 1), _num(vn), _num(l2), _num(r.cutoff_ratio_l2),
                   _num(r.cutoff_ratio_grad), str(r.picard_iters), _num(r.wall_ms)]


def emit_report(report: ConvergenceReport, directory, formats=FORMATS) -> list:
    """Write the requested report files; returns their paths."""
    formats = [f.lower() for f in formats]
    bad = set(formats) - set(FORMATS)
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HomogLabError(f"cannot create report directory {out}: {exc}") from None
    written = []
    try:
        if "csv" in formats:
            p = out / "report.csv"
            with p.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                w.writerows(csv_rows(report))
            written.append(p)
        if "json" in formats:
            p = out / "report.json"
            p.write_text(json.dumps(report.to_dict(), indent=2))
            written.append(p)
        if "plotdata" in formats:
            for i in range(report.n_species):
                p = out / f"plotdata_species{i + 1}.txt"
                lines = []
                for r in report.rows:
                    v = r.corrector_norms[i] if r.ok else math.nan
                    lines.append(f"{math.log10(r.eps)!r} {math.log10(v) if v > 0 else math.nan!r}")
                p.write_text("\n".join(lines) + "\n")
                written.append(p)
    except OSError as exc:
        raise HomogLabError(f"cannot write report to {out}: {exc}") from None
    return written


def load_report(path) -> ConvergenceReport:
    return ConvergenceReport.from_dict(json.loads(Path(path).read_text()))
