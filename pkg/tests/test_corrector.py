import json
import math

import numpy as np
import pytest

from homoglab import fem
from homoglab.config import build_spec, default_config
from homoglab.corrector import (
    CSV_COLUMNS,
    ConvergenceReport,
    EpsResult,
    NodalReconstruction,
    compute_fits,
    corrector_norm,
    cutoff_ratios,
    emit_report,
    fit_rate,
    load_report,
    run_study,
    solve_micro,
)
from homoglab.errors import HomogLabError
from homoglab.mesh import build_unit_cell_mesh, tile_perforated_mesh


def _spec(**changes):
    cfg = default_config()
    for key, value in changes.items():
        node = cfg
        *path, last = key.split(".")
        for p in path:
            node = node[p]
        node[last] = value
    return build_spec(cfg)


def flat_spec(cell_h=1 / 8, amplitude=1.0):
    """Constant d, no hole, no Robin data, no exchange: a plain Poisson problem."""
    return _spec(**{
        "diffusion": [{"kind": "constant", "value": 1.0}] * 2,
        "deposition_a": [{"kind": "constant", "value": 0.0}] * 2,
        "deposition_b": [{"kind": "constant", "value": 0.0}] * 2,
        "sources": [{"kind": "sine", "amplitude": amplitude}] * 2,
        "geometry.hole_radius": 0.0,
        "reactions.volume.kappa": [[0.0, 0.0], [0.0, 0.0]],
        "discretization.cell_h": cell_h,
    })


def test_fit_rate_examples():
    eps = [1 / 4, 1 / 8, 1 / 16, 1 / 32]
    s, _, r2 = fit_rate(eps, [3 * e for e in eps])
    assert s == pytest.approx(1.0, abs=1e-12) and r2 == pytest.approx(1.0)
    s, i, _ = fit_rate(eps, [2 * math.sqrt(e) for e in eps])
    assert s == pytest.approx(0.5, abs=1e-12)
    assert i == pytest.approx(math.log(2))
    s, _, r2 = fit_rate([1, 0.5, 0.25], [1, 1, 1])
    assert s == 0.0 and r2 == 1.0
    with pytest.raises(ValueError):
        fit_rate(eps, [1, 0, 1, 1])
    with pytest.raises(ValueError):
        fit_rate(eps[:2], [1, 2])


@pytest.fixture(scope="module")
def small_micro():
    spec = _spec(**{"discretization.cell_h": 1 / 8})
    cell = build_unit_cell_mesh(spec.cell, spec.cell_h)
    fine = tile_perforated_mesh(cell, 1 / 4)
    return spec, fine, solve_micro(0.25, spec, fine, cell_mesh=cell)


def test_corrector_norm_trivial_cases(small_micro):
    _, fine, sol = small_micro
    norms, agg = corrector_norm(0.25, sol.fields, sol.fields, fine)
    assert agg == 0.0
    zero = [np.zeros(fine.n_vertices)] * 2
    norms, agg = corrector_norm(0.25, sol.fields, zero, fine)
    expected = [fem.norm(fine, u, "H1_SEMI") for u in sol.fields]
    np.testing.assert_allclose(norms, expected, rtol=1e-12)
    assert agg == pytest.approx(math.hypot(*expected))


def test_corrector_norm_rejects_mismatch(small_micro):
    spec, fine, sol = small_micro
    other = tile_perforated_mesh(build_unit_cell_mesh(spec.cell, 1 / 4), 0.25)
    with pytest.raises(HomogLabError):
        corrector_norm(0.25, sol.fields, NodalReconstruction(other, [np.zeros(other.n_vertices)] * 2), fine)
    with pytest.raises(HomogLabError):
        corrector_norm(0.25, sol.fields, NodalReconstruction(fine, sol.fields, eps=0.125), fine)


def test_micro_solution_satisfies_dirichlet_data(small_micro):
    _, fine, sol = small_micro
    from homoglab.mesh import EdgeTag
    ext = fine.boundary_vertices(EdgeTag.EXTERIOR)
    for u in sol.fields:
        assert not u[ext].any()
        assert np.abs(u).max() > 0
    assert sol.picard.trace[-1] <= 1e-8


def test_micro_rejects_foreign_mesh(small_micro):
    spec, fine, _ = small_micro
    with pytest.raises(HomogLabError):
        solve_micro(0.125, spec, fine)


def test_micro_all_data_zero():
    spec = flat_spec(amplitude=0.0)
    cell = build_unit_cell_mesh(spec.cell, spec.cell_h)
    fine = tile_perforated_mesh(cell, 0.5)
    sol = solve_micro(0.5, spec, fine, cell_mesh=cell)
    for u in sol.fields:
        assert not u.any()
    assert sol.picard.iterations == 1


class ExactGradient:
    """Gradient of amp/(2 pi^2) sin(pi x) sin(pi y) at quadrature points."""

    def __init__(self, mesh, amp):
        self.mesh, self.amp, self.eps = mesh, amp, None
        self.rule = fem.triangle_rule(4)

    def gradient_at_quadrature(self, tris):
        from homoglab.mms import exact_gradient
        x = fem.quadrature_points(self.mesh, self.rule, tris)
        g = self.amp / (2 * np.pi**2) * exact_gradient(x)
        return np.stack([g, g])


def test_micro_matches_manufactured_rates():
    amp = 3.0
    h, e1, e2 = [], [], []
    for cell_h in (1 / 4, 1 / 8, 1 / 16, 1 / 32):
        spec = flat_spec(cell_h, amp)
        cell = build_unit_cell_mesh(spec.cell, spec.cell_h)
        fine = tile_perforated_mesh(cell, 0.5)
        sol = solve_micro(0.5, spec, fine, cell_mesh=cell, tol=1e-12)
        np.testing.assert_array_equal(sol.fields[0], sol.fields[1])
        norms, _ = corrector_norm(0.5, sol.fields, ExactGradient(fine, amp), fine)
        x = fine.vertices
        exact = amp / (2 * np.pi**2) * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
        h.append(0.5 * cell_h)
        e1.append(norms[0])
        e2.append(fem.norm(fine, sol.fields[0] - exact))
    assert 0.9 <= fit_rate(h, e1)[0] <= 1.1
    assert 1.8 <= fit_rate(h, e2)[0] <= 2.2


def test_cutoff_ratios_match_exact_integrals():
    # on the square, |1 - m|^2 integrates to 4 int_0^1/2 (1 - psi(t/eps))^2 (1 - 2t) dt;
    # the tensor rule does not resolve the diagonal kinks of the distance, hence rel 1e-4
    from scipy.integrate import quad
    from homoglab.geometry import smoothstep, smoothstep_derivative
    for eps in (1 / 4, 1 / 8):
        pts = [eps, 2 * eps]
        one = 4 * quad(lambda t: (1 - smoothstep(t / eps)) ** 2 * (1 - 2 * t), 0, 0.5, points=pts)[0]
        grad = 4 * quad(lambda t: (smoothstep_derivative(t / eps) / eps) ** 2 * (1 - 2 * t), 0, 0.5,
                        points=pts)[0]
        r1, r2 = cutoff_ratios(eps)
        assert r1 == pytest.approx(math.sqrt(one / eps), rel=1e-4)
        assert r2 == pytest.approx(eps * math.sqrt(grad / eps), rel=1e-4)


def _fake_report(n_eps=3, n_species=2):
    rows = []
    for k in range(n_eps):
        eps = 2.0 ** -(k + 2)
        rows.append(EpsResult(eps, h=eps / 24, corrector_norms=[0.3 * eps**0.5, 0.2 * eps**0.5],
                              aggregate=math.hypot(0.3, 0.2) * eps**0.5,
                              naive_norms=[0.5, 0.4], naive_aggregate=math.hypot(0.5, 0.4),
                              l2_err_u0=[0.1 * eps, 0.05 * eps], linf=[0.5, 0.25],
                              cutoff_ratio_l2=1.7 + k / 10, cutoff_ratio_grad=1.1 / 3,
                              picard_iters=9, cg_iters=100 + k, wall_ms=12.5 * (k + 1)))
    return ConvergenceReport(rows, n_species, compute_fits(rows, n_species), {}, {"note": "x"})


def test_emit_report_files(tmp_path):
    report = _fake_report()
    written = emit_report(report, tmp_path)
    assert {p.name for p in written} == {"report.csv", "report.json", "plotdata_species1.txt",
                                         "plotdata_species2.txt"}
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + 6
    plot = (tmp_path / "plotdata_species1.txt").read_text().splitlines()
    assert len(plot) == 3
    a, b = map(float, plot[0].split())
    assert a == pytest.approx(math.log10(0.25))
    assert b == pytest.approx(math.log10(0.3 * 0.5))
    assert report.slope == pytest.approx(0.5)


def test_json_roundtrip_is_exact(tmp_path):
    report = _fake_report()
    emit_report(report, tmp_path, ["json"])
    back = load_report(tmp_path / "report.json")
    assert back.to_dict() == report.to_dict()
    data = json.loads((tmp_path / "report.json").read_text())
    assert set(data["fits"]["aggregate"]) == {"slope", "intercept", "r2"}
    assert data["config"] == {"note": "x"}


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(HomogLabError):
        emit_report(_fake_report(), blocker / "sub")
    with pytest.raises(ValueError):
        emit_report(_fake_report(), tmp_path, ["xml"])


def test_trivial_study_is_pure_discretization_error():
    spec = flat_spec(1 / 8, 2.0)
    spec.eps_list = [1 / 4]
    report = run_study(spec)
    row = report.rows[0]
    assert row.ok
    # no oscillation: the corrector equals the naive error
    assert row.aggregate == pytest.approx(row.naive_aggregate, rel=1e-12)
    exact_norm = 2.0 / (2 * np.pi**2) * np.pi / math.sqrt(2)  # |grad u|_L2 of each species
    assert row.aggregate < 0.1 * math.sqrt(2) * exact_norm
    assert report.fits["aggregate"] is None


@pytest.mark.slow
def test_layered_corrector_decreases():
    spec = _spec(**{
        "diffusion": [{"kind": "layered", "v_left": 1.0, "v_right": 4.0, "split": 0.5}] * 2,
        "discretization.cell_h": 1 / 12,
        "discretization.macro_h": 1 / 64,
        "study.eps_list": [1 / 8, 1 / 16],
    })
    report = run_study(spec)
    a, b = (r.aggregate for r in report.rows)
    assert report.ok
    assert 2**-1.2 <= b / a <= 2**-0.3
