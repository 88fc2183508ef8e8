import math

import numpy as np
import pytest

from homoglab import fem
from homoglab import homogenize as H
from homoglab.coefficients import Constant, Layered, SineSource, Smooth
from homoglab.geometry import UnitCellGeometry
from homoglab.mesh import EdgeTag, build_unit_cell_mesh, structured_square_mesh, tile_perforated_mesh
from homoglab.nonlinear import ReactionSystem

TOL = 1e-10
PLAIN = UnitCellGeometry((0.5, 0.5), 0.0)
HOLE = UnitCellGeometry((0.5, 0.5), 0.25)


@pytest.fixture(scope="module")
def plain_mesh():
    return build_unit_cell_mesh(PLAIN, 1 / 32)


@pytest.fixture(scope="module")
def hole_mesh():
    return build_unit_cell_mesh(HOLE, 1 / 24)


@pytest.fixture(scope="module")
def hole_cells(hole_mesh):
    return H.solve_cells(hole_mesh, [Smooth(1.0, 0.5)], [Constant(-1.0)], [Constant(1.0)], tol=TOL)


def test_trivial_cell(plain_mesh):
    cells = H.solve_cells(plain_mesh, [Constant(2.0)], [Constant(-1.0)], [Constant(1.0)], tol=TOL)
    s = cells.species[0]
    assert np.abs(s.chi).max() < 1e-12
    np.testing.assert_allclose(s.d_hat, 2 * np.eye(2), atol=1e-12)
    assert cells.Y1_measure == pytest.approx(1.0, abs=1e-14)
    assert s.A == 0.0 and s.B == 0.0


def test_laminate_corrector_is_piecewise_linear(plain_mesh):
    chi = H.solve_first_order_cell(plain_mesh, Layered(1.0, 4.0), tol=1e-12)
    y = plain_mesh.vertices[:, 0]
    exact = np.where(y <= 0.5, 0.15 - 0.6 * y, 0.15 - 0.6 * (1 - y))
    np.testing.assert_allclose(chi[0], exact, atol=1e-9)
    assert np.abs(chi[1]).max() < 1e-9
    d_hat, *_ = H.effective_quantities(plain_mesh, Layered(1.0, 4.0), 0.0, 0.0, chi)
    np.testing.assert_allclose(d_hat, np.diag([1.6, 2.5]), atol=1e-9)


def test_voigt_reuss_bounds(plain_mesh):
    d = Smooth(1.0, 0.5)
    cells = H.solve_cells(plain_mesh, [d], [Constant(0.0)], [Constant(0.0)], tol=TOL)
    # harmonic and arithmetic means of d over the cell, by fine quadrature
    t = (np.arange(400) + 0.5) / 400
    Y = np.stack(np.meshgrid(t, t), axis=-1).reshape(-1, 2)
    vals = d(Y)
    harmonic, arithmetic = 1 / np.mean(1 / vals), np.mean(vals)
    eig = np.linalg.eigvalsh(cells.species[0].d_hat)
    assert eig.min() >= harmonic * 0.99
    assert eig.max() <= arithmetic * 1.01


def test_isotropy_for_centered_hole(hole_mesh):
    cells = H.solve_cells(hole_mesh, [Constant(1.0)], [Constant(-1.0)], [Constant(1.0)], tol=1e-12)
    dh = cells.species[0].d_hat
    assert abs(dh[0, 0] - dh[1, 1]) <= 1e-6 * dh[0, 0]
    assert abs(dh[0, 1]) <= 1e-6 * dh[0, 0]
    chi = cells.species[0].chi[0]
    # chi_1 is odd under y1 -> 1 - y1
    v = hole_mesh.vertices
    order = np.lexsort((np.round(v[:, 1], 12), np.round(v[:, 0], 12)))
    mirrored = np.lexsort((np.round(v[:, 1], 12), np.round(1 - v[:, 0], 12)))
    np.testing.assert_allclose(chi[order], -chi[mirrored], atol=1e-8)


def test_symmetric_spd_tensor(hole_cells):
    dh = hole_cells.species[0].d_hat
    assert abs(dh[0, 1] - dh[1, 0]) <= 1e-8
    assert np.linalg.eigvalsh(dh).min() > 0


def _reduced(mesh, d):
    K = fem.assemble_stiffness(mesh, d)
    system = fem.constrain(fem.SparseSystem(K, np.zeros(mesh.n_vertices)), fem.Periodic.from_mesh(mesh))
    return K, fem.ReducedSystem(fem.constrain(system, fem.ZeroMean.from_mesh(mesh)))


def _random_tests(red, count=20, seed=0):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((len(red.free), count))
    return V - V.mean(axis=0)


def test_cell_residuals_against_random_test_fields(hole_mesh, hole_cells):
    d = Smooth(1.0, 0.5)
    s = hole_cells.species[0]
    K, red = _reduced(hole_mesh, d)
    P = red.P
    V = _random_tests(red)
    loads = H.second_order_loads(hole_mesh, d, Constant(-1.0), Constant(1.0), s.chi)
    ones = loads["ones"]
    cases = []
    areas, grads = fem.p1_gradients(hole_mesh)
    rule = fem.triangle_rule(2)
    cbar = areas * (fem.sample_coefficient(hole_mesh, d, rule) @ rule.weights)
    for j in range(2):
        rhs = np.bincount(hole_mesh.triangles.ravel(), (cbar[:, None] * grads[:, :, j]).ravel(),
                          minlength=hole_mesh.n_vertices)
        cases.append((s.chi[j], rhs))
    for j in range(2):
        for k in range(2):
            cases.append((s.theta[j, k], loads[(j, k)] - s.means["theta"][j, k] * ones))
    for name in ("w_R", "w_a", "w_b"):
        cases.append((getattr(s, name), loads[name] - s.means[name] * ones))
    for field, rhs in cases:
        r = P.T @ (K @ field - rhs)
        b = P.T @ rhs
        scale = np.linalg.norm(b - b.mean()) * np.linalg.norm(V, axis=0)
        assert np.all(np.abs(V.T @ r) <= 10 * TOL * np.maximum(scale, 1e-300))


def test_recorded_means(hole_mesh, hole_cells):
    s = hole_cells.species[0]
    y1 = hole_cells.Y1_measure
    np.testing.assert_allclose(s.means["theta"], s.d_hat / y1, atol=10 * TOL)
    assert s.means["w_R"] == pytest.approx(1.0, abs=1e-14)
    assert s.means["w_a"] == pytest.approx(s.A / y1, abs=1e-14)
    assert s.means["w_b"] == pytest.approx(-s.B / y1, abs=1e-14)
    # a = -1 on the hole circle of radius 1/4, up to the polygonal deficit
    assert s.A == pytest.approx(-2 * math.pi * 0.25, rel=2e-3)
    assert y1 == pytest.approx(1 - math.pi / 16, rel=2e-3)


def test_cascade_residual_at_frozen_points(hole_mesh, hole_cells):
    """u2 solves the order-one cell equation for frozen macro data."""
    d = Smooth(1.0, 0.5)
    s = hole_cells.species[0]
    K, red = _reduced(hole_mesh, d)
    loads = H.second_order_loads(hole_mesh, d, Constant(-1.0), Constant(1.0), s.chi)
    ones = loads["ones"]
    rng = np.random.default_rng(7)
    for _ in range(5):
        Hm = rng.standard_normal((2, 2))
        Hm = Hm + Hm.T
        prod, u0 = rng.standard_normal(2)
        Fu = u0
        u2 = sum(s.theta[j, k] * Hm[j, k] for j in range(2) for k in range(2)) \
            + s.w_R * prod + s.w_a * u0 + s.w_b * Fu
        load = sum(loads[(j, k)] * Hm[j, k] for j in range(2) for k in range(2)) \
            + loads["w_R"] * prod + loads["w_a"] * u0 + loads["w_b"] * Fu
        mean = np.sum(s.means["theta"] * Hm) + s.means["w_R"] * prod + s.means["w_a"] * u0 + s.means["w_b"] * Fu
        r = red.P.T @ (K @ u2 - load + mean * ones)
        b = red.P.T @ (load - mean * ones)
        assert np.linalg.norm(r - r.mean()) <= 10 * TOL * 10 * np.linalg.norm(b)
        # the combined mean vanishes exactly when the macro equation holds at x*
        y1 = hole_cells.Y1_measure
        expected = (np.sum(s.d_hat * Hm) + y1 * prod + s.A * u0 - s.B * Fu) / y1
        assert mean == pytest.approx(expected, abs=1e-12)


def test_save_load_roundtrip(hole_cells, tmp_path):
    hole_cells.save(tmp_path / "cells")
    back = H.CellSolutions.load(tmp_path / "cells")
    a, b = hole_cells.species[0], back.species[0]
    np.testing.assert_array_equal(a.chi, b.chi)
    np.testing.assert_array_equal(a.theta, b.theta)
    np.testing.assert_array_equal(a.d_hat, b.d_hat)
    np.testing.assert_array_equal(a.w_b, b.w_b)
    assert (a.A, a.B) == (b.A, b.B)
    assert back.Y1_measure == hole_cells.Y1_measure
    np.testing.assert_array_equal(a.means["theta"], b.means["theta"])


def test_recovery_reproduces_linear_fields():
    mesh = structured_square_mesh(8)
    x, y = mesh.vertices.T
    g, Hs = H.recover_derivatives(mesh, 3 * x - 2 * y + 1)
    np.testing.assert_allclose(g, np.broadcast_to([3.0, -2.0], g.shape), atol=1e-10)
    assert np.abs(Hs).max() < 1e-10
    g, Hs = H.recover_derivatives(mesh, np.zeros(mesh.n_vertices))
    assert not g.any() and not Hs.any()


def test_recovered_hessian_of_quadratic():
    mesh = structured_square_mesh(16)
    x = mesh.vertices[:, 0]
    _, Hs = H.recover_derivatives(mesh, x**2)
    inner = np.all((mesh.vertices > 0.25) & (mesh.vertices < 0.75), axis=1)
    np.testing.assert_allclose(Hs[inner, 0], 2.0, atol=1e-10)
    np.testing.assert_allclose(Hs[inner, 1:], 0.0, atol=1e-10)


def test_recovered_hessian_converges():
    errors = []
    for n in (8, 16, 32):
        mesh = structured_square_mesh(n)
        x, y = mesh.vertices.T
        _, Hs = H.recover_derivatives(mesh, np.exp(x) * np.sin(2 * y))
        inner = np.all((mesh.vertices > 0.25) & (mesh.vertices < 0.75), axis=1)
        exact = np.exp(x) * np.sin(2 * y)
        errors.append(np.abs(Hs[inner, 0] - exact[inner]).max())
    rates = np.log2(np.array(errors[:-1]) / errors[1:])
    assert np.all(rates >= 1.0)


def _flat_cells(n=8):
    mesh = build_unit_cell_mesh(PLAIN, 1 / n)
    return H.solve_cells(mesh, [Constant(1.0)] * 2, [Constant(0.0)] * 2, [Constant(0.0)] * 2, tol=TOL)


def test_macro_zero_data_gives_zero():
    cells = _flat_cells()
    macro = H.solve_macro(cells, ReactionSystem(2), [None, None], structured_square_mesh(8))
    for u in macro.u0:
        assert not u.any()


def test_macro_matches_manufactured_poisson():
    cells = _flat_cells()
    errors = []
    for n in (16, 32):
        mesh = structured_square_mesh(n)
        src = SineSource(2 * np.pi**2)
        macro = H.solve_macro(cells, ReactionSystem(2), [src, src], mesh)
        exact = np.sin(np.pi * mesh.vertices[:, 0]) * np.sin(np.pi * mesh.vertices[:, 1])
        errors.append(fem.norm(mesh, macro.u0[0] - exact))
        np.testing.assert_array_equal(macro.u0[0], macro.u0[1])
    assert math.log2(errors[0] / errors[1]) > 1.8


def test_expansion_trivial_identity_and_boundary_layer():
    cells = _flat_cells()
    src = SineSource(5.0)
    macro = H.solve_macro(cells, ReactionSystem(2), [src, src], structured_square_mesh(16))
    fine = tile_perforated_mesh(cells.mesh, 1 / 4)
    exp = H.reconstruct_expansion(0.25, fine, macro, cells, ReactionSystem(2), [src, src])
    u0 = H.fem_interp(macro.mesh, macro.stacked(), fine.vertices, exp.locator)[:, 0]
    np.testing.assert_allclose(exp.values[0], u0, atol=1e-12)


def test_cutoff_kills_higher_orders_near_the_boundary(hole_cells):
    src = SineSource(10.0)
    reactions = ReactionSystem(2, kappa=np.array([[0, 1.0], [1.0, 0]]))
    cells = H.CellSolutions(hole_cells.mesh, hole_cells.Y1_measure, hole_cells.species * 2)
    macro = H.solve_macro(cells, reactions, [src, src], structured_square_mesh(32))
    eps = 1 / 8
    fine = tile_perforated_mesh(cells.mesh, eps)
    exp = H.reconstruct_expansion(eps, fine, macro, cells, reactions, [src, src])
    u0 = H.fem_interp(macro.mesh, macro.stacked(), fine.vertices, exp.locator)[:, 0]
    v = fine.vertices
    near = np.min(np.column_stack([v, 1 - v]), axis=1) <= eps
    np.testing.assert_array_equal(exp.values[0][near], u0[near])
    assert np.abs(exp.values[0][~near] - u0[~near]).max() > 0
    assert fine.boundary_vertices(EdgeTag.EXTERIOR).size
