import numpy as np
import pytest

from homoglab.errors import MeshingError, NotFoundError
from homoglab.geometry import UnitCellGeometry
from homoglab.mesh import (
    EdgeTag,
    PointLocator,
    build_unit_cell_mesh,
    check_mesh,
    interpolate,
    locate,
    read_mesh,
    structured_square_mesh,
    tile_perforated_mesh,
    unique_edges,
    write_mesh,
)

CELL = UnitCellGeometry((0.5, 0.5), 0.25)


@pytest.fixture(scope="module")
def cell_mesh():
    return build_unit_cell_mesh(CELL, 1 / 16)


def test_unperforated_cell_at_coarsest_h():
    mesh = build_unit_cell_mesh(UnitCellGeometry((0.5, 0.5), 0.0), 0.5)
    check_mesh(mesh)
    assert len(mesh.tagged_edges(EdgeTag.HOLE)) == 0
    assert mesh.area() == pytest.approx(1.0, abs=1e-14)
    assert mesh.hole_count == 0


def test_h_out_of_range():
    with pytest.raises(MeshingError):
        build_unit_cell_mesh(CELL, 0.6)
    with pytest.raises(MeshingError):
        build_unit_cell_mesh(CELL, 0.0)


@pytest.mark.parametrize("h", [1 / 8, 1 / 16, 1 / 32])
def test_cell_mesh_invariants(h):
    mesh = build_unit_cell_mesh(CELL, h)
    info = check_mesh(mesh)
    assert info["vertices"] - info["edges"] + info["triangles"] == 0
    assert abs(mesh.area() - CELL.exact_measure) / CELL.exact_measure < 0.01
    hole_len = mesh.edge_lengths(EdgeTag.HOLE).sum()
    assert abs(hole_len - CELL.exact_perimeter) / CELL.exact_perimeter < 0.01
    assert mesh.max_edge_length() <= 2 * h
    # hole vertices sit on the circle
    hv = mesh.boundary_vertices(EdgeTag.HOLE)
    r = np.linalg.norm(mesh.vertices[hv] - 0.5, axis=1)
    np.testing.assert_allclose(r, 0.25, atol=1e-14)


def test_periodic_pairs_match(cell_mesh):
    for axis, pairs in ((0, cell_mesh.periodic_x), (1, cell_mesh.periodic_y)):
        d = cell_mesh.vertices[pairs[:, 1]] - cell_mesh.vertices[pairs[:, 0]]
        expected = np.zeros(2)
        expected[axis] = 1.0
        np.testing.assert_allclose(d, np.broadcast_to(expected, d.shape), atol=1e-14)
    # every OUTER_CELL vertex on the right side has a partner
    right = np.flatnonzero(np.abs(cell_mesh.vertices[:, 0] - 1) < 1e-14)
    assert set(right) == set(cell_mesh.periodic_x[:, 1])


def test_eps_one_retags_outer_edges(cell_mesh):
    fine = tile_perforated_mesh(cell_mesh, 1.0)
    check_mesh(fine)
    assert len(fine.tagged_edges(EdgeTag.OUTER_CELL)) == 0
    assert len(fine.tagged_edges(EdgeTag.EXTERIOR)) == len(cell_mesh.tagged_edges(EdgeTag.OUTER_CELL))
    np.testing.assert_allclose(fine.vertices, cell_mesh.vertices)


@pytest.mark.parametrize("eps", [1 / 2, 1 / 4, 1 / 8])
def test_tiled_mesh(cell_mesh, eps):
    fine = tile_perforated_mesh(cell_mesh, eps)
    info = check_mesh(fine)
    n = round(1 / eps)
    assert fine.hole_count == n * n
    assert info["vertices"] - info["edges"] + info["triangles"] == 1 - n * n
    assert fine.area() == pytest.approx(cell_mesh.area(), rel=1e-12)
    hole_len = fine.edge_lengths(EdgeTag.HOLE).sum()
    assert hole_len == pytest.approx(n * n * eps * cell_mesh.edge_lengths(EdgeTag.HOLE).sum(), rel=1e-12)
    ext = fine.vertices[fine.boundary_vertices(EdgeTag.EXTERIOR)]
    on_square = np.min(np.column_stack([ext, 1 - ext]), axis=1)
    np.testing.assert_allclose(on_square, 0.0, atol=1e-14)
    # each fine triangle is an exact scaled copy of its source triangle
    src = cell_mesh.vertices[cell_mesh.triangles[fine.tri_source]]
    mapped = eps * (fine.tri_cell[:, None, :] + src)
    np.testing.assert_allclose(fine.vertices[fine.triangles], mapped, atol=1e-14)
    mapped_v = eps * (fine.vertex_cell + cell_mesh.vertices[fine.vertex_source])
    np.testing.assert_allclose(fine.vertices, mapped_v, atol=1e-14)


def test_tiling_rejects_bad_eps(cell_mesh):
    with pytest.raises(MeshingError):
        tile_perforated_mesh(cell_mesh, 0.3)


def test_structured_mesh_counts():
    mesh = structured_square_mesh(4)
    info = check_mesh(mesh)
    assert (info["vertices"], info["triangles"], info["boundary_edges"]) == (25, 32, 16)
    edges, counts = unique_edges(mesh.triangles)
    assert len(edges) == 56


def test_locate_examples():
    mesh = structured_square_mesh(2)
    tri, bary = locate(mesh, (0.25, 0.25))
    p = mesh.vertices[mesh.triangles[tri]]
    np.testing.assert_allclose(bary @ p, [0.25, 0.25], atol=1e-14)
    assert bary.sum() == pytest.approx(1.0)
    assert np.all(bary >= -1e-14)
    with pytest.raises(NotFoundError):
        locate(mesh, (1.5, 0.5))


def test_locate_in_hole_fails(cell_mesh):
    with pytest.raises(NotFoundError):
        locate(cell_mesh, (0.5, 0.5))


def test_interpolation_reproduces_linear_fields(cell_mesh):
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, size=(2000, 2))
    pts = pts[np.linalg.norm(pts - 0.5, axis=1) > 0.26]
    loc = PointLocator(cell_mesh)
    tri, _ = loc.locate(pts)
    assert np.all(tri >= 0)
    f = 3 * cell_mesh.vertices[:, 0] - 2 * cell_mesh.vertices[:, 1] + 0.5
    vals = interpolate(cell_mesh, f, pts, locator=loc)
    np.testing.assert_allclose(vals, 3 * pts[:, 0] - 2 * pts[:, 1] + 0.5, atol=1e-13)


def test_write_read_roundtrip(cell_mesh, tmp_path):
    path = tmp_path / "cell.txt"
    write_mesh(cell_mesh, path)
    back = read_mesh(path)
    np.testing.assert_array_equal(back.vertices, cell_mesh.vertices)
    np.testing.assert_array_equal(back.triangles, cell_mesh.triangles)
    np.testing.assert_array_equal(back.edges, cell_mesh.edges)
    np.testing.assert_array_equal(back.edge_tags, cell_mesh.edge_tags)
    np.testing.assert_array_equal(back.periodic_x, cell_mesh.periodic_x)
    assert back.hole_count == 1
    check_mesh(back)


def test_mesh_is_symmetric_under_reflection(cell_mesh):
    # reflecting x -> 1 - x maps the vertex set onto itself
    v = cell_mesh.vertices
    key = lambda a: set(map(tuple, np.round(a, 12).tolist()))
    assert key(v) == key(np.column_stack([1 - v[:, 0], v[:, 1]]))
    assert key(v) == key(v[:, ::-1])
