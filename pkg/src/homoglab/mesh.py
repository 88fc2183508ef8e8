"""Triangulations of the punctured cell and of the tiled perforated square.

The cell mesh is an O-grid between the hole circle and the cell square with
a diagonal pattern that keeps the full dihedral symmetry of the square, so a
centred hole gives an isotropic discrete effective tensor. Fine meshes are
never generated independently; they are scaled and translated copies of the
cell mesh glued through its periodic vertex pairing.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MeshingError, NotFoundError, GeometryError
from .geometry import UnitCellGeometry, cells_per_side

PAIR_TOL = 1e-12


class EdgeTag(enum.IntEnum):
    HOLE = 1
    OUTER_CELL = 2
    EXTERIOR = 3


@dataclass
class TriMesh:
    vertices: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3), counterclockwise
    edges: np.ndarray  # (ne, 2) tagged boundary edges
    edge_tags: np.ndarray  # (ne,) EdgeTag values
    periodic_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    periodic_y: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))
    # tiled meshes only
    epsilon: float | None = None
    tri_cell: np.ndarray | None = None  # (nt, 2) cell index of each fine triangle
    tri_source: np.ndarray | None = None  # (nt,) cell-mesh triangle
    vertex_cell: np.ndarray | None = None
    vertex_source: np.ndarray | None = None
    hole_count: int = 0

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def tagged_edges(self, tag) -> np.ndarray:
        tag = EdgeTag(tag)
        return self.edges[self.edge_tags == tag]

    def boundary_vertices(self, tag) -> np.ndarray:
        return np.unique(self.tagged_edges(tag))

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def area(self) -> float:
        return float(self.signed_areas().sum())

    def max_edge_length(self) -> float:
        p = self.vertices[self.triangles]
        lengths = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
        return float(lengths.max())

    def edge_lengths(self, tag) -> np.ndarray:
        e = self.tagged_edges(tag)
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    def periodic_pairs(self) -> np.ndarray:
        """(master, slave) pairs with every slave resolved to its root master."""
        root = np.arange(self.n_vertices)
        for pairs in (self.periodic_x, self.periodic_y):
            root[pairs[:, 1]] = pairs[:, 0]
        # the (1,1) corner is reached through two hops
        for _ in range(2):
            root = root[root]
        slaves = np.flatnonzero(root != np.arange(self.n_vertices))
        return np.column_stack([root[slaves], slaves])

    @property
    def is_tiled(self) -> bool:
        return self.tri_source is not None


def unique_edges(triangles: np.ndarray):
    """All edges as sorted vertex pairs, with the number of triangles sharing each."""
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    return edges, counts


def check_mesh(mesh: TriMesh, area_tol: float = 0.0) -> dict:
    """Run the TriMesh invariant suite; raise MeshingError on the first failure."""
    areas = mesh.signed_areas()
    if np.any(areas <= area_tol):
        raise MeshingError(f"{np.sum(areas <= area_tol)} triangles with non-positive area")
    edges, counts = unique_edges(mesh.triangles)
    if np.any(counts > 2):
        raise MeshingError("edge shared by more than two triangles")
    boundary = edges[counts == 1]
    tagged = np.sort(mesh.edges, axis=1)
    b_keys = set(map(tuple, boundary.tolist()))
    t_keys = set(map(tuple, tagged.tolist()))
    if b_keys != t_keys:
        raise MeshingError("tagged edges do not coincide with the mesh boundary")
    v, e, f = mesh.n_vertices, len(edges), mesh.n_triangles
    if v - e + f != 1 - mesh.hole_count:
        raise MeshingError(f"Euler relation fails: V-E+F={v - e + f}, expected {1 - mesh.hole_count}")
    for axis, pairs in ((0, mesh.periodic_x), (1, mesh.periodic_y)):
        if len(pairs):
            shift = np.zeros(2)
            shift[axis] = 1.0
            gap = mesh.vertices[pairs[:, 1]] - mesh.vertices[pairs[:, 0]] - shift
            if np.abs(gap).max() > PAIR_TOL:
                raise MeshingError("periodic pairs do not match under translation")
    return {"vertices": v, "edges": e, "triangles": f, "boundary_edges": len(boundary)}


def _orient(vertices, triangles):
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    neg = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    triangles[neg] = triangles[neg][:, [0, 2, 1]]
    return triangles


def _pair_side(vertices, axis):
    """Pair vertices on the low and high side of the unit square along ``axis``."""
    other = 1 - axis
    low = np.flatnonzero(np.abs(vertices[:, axis]) <= PAIR_TOL)
    high = np.flatnonzero(np.abs(vertices[:, axis] - 1.0) <= PAIR_TOL)
    if len(low) != len(high):
        raise MeshingError("opposite cell edges carry different vertex counts")
    low = low[np.argsort(vertices[low, other], kind="stable")]
    high = high[np.argsort(vertices[high, other], kind="stable")]
    if len(low) and np.abs(vertices[low, other] - vertices[high, other]).max() > PAIR_TOL:
        raise MeshingError("boundary vertex layouts on opposite cell edges differ")
    return np.column_stack([low, high]).astype(np.int64)


def _square_boundary_edges(vertices, triangles):
    edges, counts = unique_edges(triangles)
    return edges[counts == 1]


def structured_square_mesh(n: int, tag=EdgeTag.EXTERIOR, periodic=False) -> TriMesh:
    """``n x n`` squares on the unit square, two triangles each.

    For even ``n`` the diagonals alternate (union-jack pattern), which keeps
    the mesh symmetric under the symmetries of the square.
    """
    if n < 1:
        raise MeshingError("need at least one square per side")
    t = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(t, t, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.divmod(np.arange(n * n), n)
    v00 = j * (n + 1) + i
    v10, v01, v11 = v00 + 1, v00 + n + 1, v00 + n + 2
    slash = ((i + j) % 2 == 0) if n % 2 == 0 else np.ones(n * n, bool)
    tri_a = np.where(slash[:, None], np.column_stack([v00, v10, v11]), np.column_stack([v00, v10, v01]))
    tri_b = np.where(slash[:, None], np.column_stack([v00, v11, v01]), np.column_stack([v10, v11, v01]))
    triangles = _orient(vertices, np.concatenate([tri_a, tri_b]).astype(np.int64))
    edges = _square_boundary_edges(vertices, triangles)
    mesh = TriMesh(vertices, triangles, edges, np.full(len(edges), int(tag)))
    if periodic:
        mesh.periodic_x = _pair_side(vertices, 0)
        mesh.periodic_y = _pair_side(vertices, 1)
    return mesh


def _square_perimeter_points(m: int) -> np.ndarray:
    """``4m`` points on the unit square boundary, counterclockwise from (1, 0.5).

    ``m`` must be even so that the corners and edge midpoints are vertices.
    """
    t = np.linspace(0.0, 1.0, m + 1)
    half = m // 2
    right_up = np.column_stack([np.ones(half), t[half:m]])
    top = np.column_stack([t[::-1][:m], np.ones(m)])
    left = np.column_stack([np.zeros(m), t[::-1][:m]])
    bottom = np.column_stack([t[:m], np.zeros(m)])
    right_low = np.column_stack([np.ones(half), t[:half]])
    return np.concatenate([right_up, top, left, bottom, right_low])


def build_unit_cell_mesh(cell: UnitCellGeometry, h_target: float) -> TriMesh:
    """Conforming triangulation of ``Y1`` with periodic boundary layout.

    Without a hole this is the structured grid; with a hole it is an O-grid
    whose inner ring sits exactly on the circle.
    """
    if not isinstance(cell, UnitCellGeometry):
        raise GeometryError("expected a UnitCellGeometry")
    if not 0.0 < h_target <= 0.5:
        raise MeshingError(f"h_target must lie in (0, 0.5], got {h_target}")
    m = 2 * math.ceil(1.0 / (2.0 * h_target) - 1e-9)
    if not cell.perforated:
        mesh = structured_square_mesh(m, tag=EdgeTag.OUTER_CELL, periodic=True)
        return mesh

    n_ang = 4 * m
    if n_ang < 16:
        raise MeshingError(f"h_target={h_target} puts fewer than 16 edges on the hole circle")
    outer = _square_perimeter_points(m)
    theta = 2.0 * np.pi * np.arange(n_ang) / n_ang
    c = np.asarray(cell.hole_center)
    inner = c + cell.hole_radius * np.column_stack([np.cos(theta), np.sin(theta)])
    gap = np.linalg.norm(outer - inner, axis=1).max()
    n_rad = max(1, math.ceil(gap / h_target - 1e-9))
    s = np.linspace(0.0, 1.0, n_rad + 1)
    rings = (1.0 - s)[:, None, None] * inner[None] + s[:, None, None] * outer[None]
    rings[-1] = outer  # keep the exact boundary coordinates
    vertices = rings.reshape(-1, 2)

    k, l = np.meshgrid(np.arange(n_ang), np.arange(n_rad), indexing="xy")
    k, l = k.ravel(), l.ravel()
    kp = (k + 1) % n_ang
    a, b = l * n_ang + k, l * n_ang + kp
    d, e = (l + 1) * n_ang + k, (l + 1) * n_ang + kp
    octant_even = (k // (m // 2)) % 2 == 0
    tri_1 = np.where(octant_even[:, None], np.column_stack([a, b, e]), np.column_stack([a, b, d]))
    tri_2 = np.where(octant_even[:, None], np.column_stack([a, e, d]), np.column_stack([b, e, d]))
    triangles = _orient(vertices, np.concatenate([tri_1, tri_2]).astype(np.int64))

    ring = np.arange(n_ang)
    hole_edges = np.column_stack([ring, (ring + 1) % n_ang])
    outer_edges = n_rad * n_ang + hole_edges
    edges = np.concatenate([hole_edges, outer_edges]).astype(np.int64)
    tags = np.concatenate([np.full(n_ang, int(EdgeTag.HOLE)), np.full(n_ang, int(EdgeTag.OUTER_CELL))])
    mesh = TriMesh(vertices, triangles, edges, tags, hole_count=1)
    if np.any(mesh.signed_areas() <= 0):
        raise MeshingError("O-grid folded over; hole too close to the cell boundary for this h_target")
    mesh.periodic_x = _pair_side(vertices, 0)
    mesh.periodic_y = _pair_side(vertices, 1)
    return mesh


def _edge_sides(mesh: TriMesh):
    """Side of the cell (0 left, 1 right, 2 bottom, 3 top) for each OUTER_CELL edge."""
    e = mesh.tagged_edges(EdgeTag.OUTER_CELL)
    p = mesh.vertices[e]
    side = np.full(len(e), -1)
    side[np.all(np.abs(p[:, :, 0]) <= PAIR_TOL, axis=1)] = 0
    side[np.all(np.abs(p[:, :, 0] - 1) <= PAIR_TOL, axis=1)] = 1
    side[np.all(np.abs(p[:, :, 1]) <= PAIR_TOL, axis=1)] = 2
    side[np.all(np.abs(p[:, :, 1] - 1) <= PAIR_TOL, axis=1)] = 3
    if np.any(side < 0):
        raise MeshingError("OUTER_CELL edge not on the cell square")
    return e, side


def tile_perforated_mesh(cell_mesh: TriMesh, eps: float) -> TriMesh:
    """Glue ``(1/eps)^2`` scaled copies of the cell mesh into a mesh of ``Omega^eps``."""
    try:
        n = cells_per_side(eps)
    except GeometryError as exc:
        raise MeshingError(str(exc)) from exc
    nv_c = cell_mesh.n_vertices
    if n > 1 and (len(cell_mesh.periodic_x) == 0 or len(cell_mesh.periodic_y) == 0):
        raise MeshingError("cell mesh has no periodic pairing")
    px = np.full(nv_c, -1)
    py = np.full(nv_c, -1)
    px[cell_mesh.periodic_x[:, 1]] = cell_mesh.periodic_x[:, 0]
    py[cell_mesh.periodic_y[:, 1]] = cell_mesh.periodic_y[:, 0]

    n_cells = n * n
    cj, ci = np.divmod(np.repeat(np.arange(n_cells), nv_c), n)
    cv = np.tile(np.arange(nv_c), n_cells)
    orig_i, orig_j, orig_v = ci.copy(), cj.copy(), cv.copy()
    # move right/top edge vertices onto the neighbour's left/bottom copy
    while True:
        mx = (px[cv] >= 0) & (ci + 1 < n)
        ci[mx] += 1
        cv[mx] = px[cv[mx]]
        my = (py[cv] >= 0) & (cj + 1 < n)
        cj[my] += 1
        cv[my] = py[cv[my]]
        if not (mx.any() or my.any()):
            break
    key = (cj * n + ci) * nv_c + cv
    _, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    inverse = inverse.ravel()

    yc = cell_mesh.vertices
    vertices = eps * (np.column_stack([ci[first], cj[first]]) + yc[cv[first]])
    rep = eps * (np.column_stack([orig_i, orig_j]) + yc[orig_v])
    if n_cells and np.abs(rep - vertices[inverse]).max() > 1e-12:
        raise MeshingError("periodic pairing mismatch while gluing cells")

    nt_c = cell_mesh.n_triangles
    cells = np.arange(n_cells)
    triangles = inverse[(cells[:, None, None] * nv_c + cell_mesh.triangles[None]).reshape(-1, 3)]
    tj, ti = np.divmod(np.repeat(cells, nt_c), n)

    hole = cell_mesh.tagged_edges(EdgeTag.HOLE)
    hole_edges = inverse[(cells[:, None, None] * nv_c + hole[None]).reshape(-1, 2)]
    outer, side = _edge_sides(cell_mesh)
    ext = []
    cell_i = np.arange(n_cells) % n
    cell_j = np.arange(n_cells) // n
    on_side = [cell_i == 0, cell_i == n - 1, cell_j == 0, cell_j == n - 1]
    for s in range(4):
        cs = np.flatnonzero(on_side[s])
        es = outer[side == s]
        ext.append(inverse[(cs[:, None, None] * nv_c + es[None]).reshape(-1, 2)])
    ext_edges = np.concatenate(ext) if ext else np.zeros((0, 2), np.int64)
    edges = np.concatenate([hole_edges, ext_edges]).astype(np.int64)
    tags = np.concatenate([np.full(len(hole_edges), int(EdgeTag.HOLE)),
                           np.full(len(ext_edges), int(EdgeTag.EXTERIOR))])
    return TriMesh(
        vertices=vertices,
        triangles=triangles.astype(np.int64),
        edges=edges,
        edge_tags=tags,
        epsilon=float(eps),
        tri_cell=np.column_stack([ti, tj]),
        tri_source=np.tile(np.arange(nt_c), n_cells),
        vertex_cell=np.column_stack([ci[first], cj[first]]),
        vertex_source=cv[first],
        hole_count=cell_mesh.hole_count * n_cells,
    )


class PointLocator:
    """Bucket grid over a triangle mesh for batched point location."""

    def __init__(self, mesh: TriMesh, bins: int | None = None):
        self.mesh = mesh
        p = mesh.vertices[mesh.triangles]
        self.lo = mesh.vertices.min(axis=0)
        span = mesh.vertices.max(axis=0) - self.lo
        self.span = np.where(span > 0, span, 1.0)
        nb = bins or max(1, int(math.sqrt(mesh.n_triangles / 2)))
        self.nb = nb
        # affine inverse maps to barycentric coordinates
        self.origin = p[:, 0]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.inv = np.linalg.inv(jac)
        b0 = self._bin(p.min(axis=1))
        b1 = self._bin(p.max(axis=1))
        tris, cells = [], []
        width = (b1 - b0).max(axis=0)
        for dx in range(width[0] + 1):
            for dy in range(width[1] + 1):
                ok = (b0[:, 0] + dx <= b1[:, 0]) & (b0[:, 1] + dy <= b1[:, 1])
                t = np.flatnonzero(ok)
                tris.append(t)
                cells.append((b0[t, 1] + dy) * nb + b0[t, 0] + dx)
        tris = np.concatenate(tris)
        cells = np.concatenate(cells)
        order = np.lexsort((tris, cells))
        self.cand = tris[order]
        self.start = np.searchsorted(cells[order], np.arange(nb * nb + 1))

    def _bin(self, x):
        b = np.floor((x - self.lo) / self.span * self.nb).astype(np.int64)
        return np.clip(b, 0, self.nb - 1)

    def barycentric(self, tri, pts):
        lam12 = np.einsum("nij,nj->ni", self.inv[tri], pts - self.origin[tri])
        return np.column_stack([1.0 - lam12.sum(axis=1), lam12])

    def locate(self, pts, tol=1e-12):
        """Triangle index (-1 when not found) and barycentric coordinates per point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        b = self._bin(pts)
        cell = b[:, 1] * self.nb + b[:, 0]
        first, count = self.start[cell], self.start[cell + 1] - self.start[cell]
        tri = np.full(len(pts), -1, dtype=np.int64)
        bary = np.zeros((len(pts), 3))
        best = np.full(len(pts), -np.inf)
        for k in range(int(count.max(initial=0))):
            act = np.flatnonzero((count > k) & (best < -tol))
            if len(act) == 0:
                break
            t = self.cand[first[act] + k]
            lam = self.barycentric(t, pts[act])
            score = lam.min(axis=1)
            better = score > best[act]
            idx = act[better]
            tri[idx], bary[idx], best[idx] = t[better], lam[better], score[better]
        tri[best < -tol] = -1
        return tri, bary


def locate(mesh: TriMesh, p, locator: PointLocator | None = None):
    """Triangle containing ``p`` and the barycentric coordinates of ``p`` in it."""
    loc = locator or PointLocator(mesh)
    tri, bary = loc.locate(np.asarray(p, dtype=float)[None])
    if tri[0] < 0:
        raise NotFoundError(f"point {tuple(np.asarray(p).tolist())} is not in the meshed region")
    return int(tri[0]), bary[0]


def interpolate(mesh: TriMesh, values, pts, locator: PointLocator | None = None):
    """Evaluate P1 nodal field(s) at points; ``values`` is (nv,) or (nv, k)."""
    loc = locator or PointLocator(mesh)
    tri, bary = loc.locate(pts)
    if np.any(tri < 0):
        raise NotFoundError(f"{np.sum(tri < 0)} points lie outside the mesh")
    vals = np.asarray(values)[mesh.triangles[tri]]
    return np.einsum("ni,ni...->n...", bary, vals)


def write_mesh(mesh: TriMesh, path) -> None:
    """Plain-text dump: vertices, triangles, tagged edges, periodic pairs."""
    with open(path, "w") as fh:
        fh.write(f"# vertices {mesh.n_vertices}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        fh.write(f"# triangles {mesh.n_triangles}\n")
        np.savetxt(fh, mesh.triangles, fmt="%d")
        fh.write(f"# edges {len(mesh.edges)}\n")
        for (i, j), t in zip(mesh.edges, mesh.edge_tags):
            fh.write(f"{i} {j} {EdgeTag(t).name}\n")
        pairs = [(a, b, "X") for a, b in mesh.periodic_x] + [(a, b, "Y") for a, b in mesh.periodic_y]
        fh.write(f"# periodic {len(pairs)}\n")
        for a, b, ax in pairs:
            fh.write(f"{a} {b} {ax}\n")
        fh.write(f"# holes {mesh.hole_count}\n")


def read_mesh(path) -> TriMesh:
    sections: dict[str, list[str]] = {}
    current = None
    holes = 0
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                name, count = line[1:].split()
                current = name
                sections[name] = []
                if name == "holes":
                    holes = int(count)
                continue
            sections[current].append(line)
    vertices = np.array([list(map(float, s.split())) for s in sections["vertices"]]).reshape(-1, 2)
    triangles = np.array([list(map(int, s.split())) for s in sections["triangles"]], dtype=np.int64).reshape(-1, 3)
    edges, tags = [], []
    for s in sections.get("edges", []):
        i, j, t = s.split()
        edges.append((int(i), int(j)))
        tags.append(int(EdgeTag[t]))
    px, py = [], []
    for s in sections.get("periodic", []):
        a, b, ax = s.split()
        (px if ax == "X" else py).append((int(a), int(b)))
    return TriMesh(
        vertices, triangles,
        np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(tags, dtype=np.int64),
        periodic_x=np.array(px, dtype=np.int64).reshape(-1, 2),
        periodic_y=np.array(py, dtype=np.int64).reshape(-1, 2),
        hole_count=holes,
    )
