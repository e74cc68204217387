"""Discretized heart domains and their spatial difference operators.

Two domain kinds are supported: a flat ``grid2d`` (node ``j*nx + i`` sits at
``(i*h, j*h)``) and a triangulated surface ``trimesh``.  All operators are
returned as :class:`SparseOperator` values whose entries are kept in sorted
(row, col) order so that two constructions from identical inputs compare equal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

COT_FLOOR = 1e-8


class MeshFormatError(ValueError):
    """Raised for malformed or non-manifold mesh files."""


class DegenerateTriangleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Immutable sparse matrix with deterministic, duplicate-free entries."""

    shape: tuple[int, int]
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    _csr: sp.csr_matrix = field(repr=False, compare=False, default=None)

    @classmethod
    def from_triples(cls, shape, rows, cols, vals) -> "SparseOperator":
        """Build from (row, col, value) triples; duplicate positions are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        n_rows, n_cols = shape
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows
                          or cols.min() < 0 or cols.max() >= n_cols):
            raise IndexError("operator entry index out of range")
        # stable sort keeps the summation order of duplicates deterministic
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            new = np.ones(rows.size, dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            starts = np.flatnonzero(new)
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
        csr = sp.csr_matrix((vals, (rows, cols)), shape=shape)
        csr.sort_indices()
        return cls((int(n_rows), int(n_cols)), rows, cols, vals, csr)

    @property
    def csr(self) -> sp.csr_matrix:
        return self._csr

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.vals.tolist()))

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self._csr.sum(axis=1)).ravel()

    def transpose(self) -> "SparseOperator":
        return SparseOperator.from_triples(self.shape[::-1], self.cols, self.rows, self.vals)

    def __matmul__(self, x):
        return self._csr @ np.asarray(x, dtype=float)

    def __eq__(self, other):
        if not isinstance(other, SparseOperator):
            return NotImplemented
        return (self.shape == other.shape and np.array_equal(self.rows, other.rows)
                and np.array_equal(self.cols, other.cols)
                and np.array_equal(self.vals, other.vals))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SpatialDomain:
    kind: str                      # "grid2d" | "trimesh"
    node_coords: np.ndarray        # (N, 2) for grid2d, (N, 3) for trimesh
    elements: np.ndarray           # (C, 4) grid cells or (F, 3) triangles
    boundary_nodes: np.ndarray
    boundary_normals: np.ndarray   # unit vectors, one per boundary node
    spacing: float | None = None
    grid_shape: tuple[int, int] | None = None

    @property
    def node_count(self) -> int:
        return int(self.node_coords.shape[0])

    @property
    def dim(self) -> int:
        return int(self.node_coords.shape[1])

    @property
    def is_closed(self) -> bool:
        return self.boundary_nodes.size == 0

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.node_coords.min(axis=0), self.node_coords.max(axis=0)


def build_grid(nx: int, ny: int, h: float) -> SpatialDomain:
    """Rectangular ``nx`` x ``ny`` lattice with spacing ``h``.

    Boundary nodes are the perimeter; corner normals average the two adjacent
    edge normals and are renormalized.
    """
    if nx < 3 or ny < 3:
        raise ValueError(f"grid needs nx, ny >= 3 for an interior node, got {nx}x{ny}")
    if not h > 0:
        raise ValueError("grid spacing must be positive")
    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    coords = np.column_stack([ii.ravel() * h, jj.ravel() * h]).astype(float)
    cells = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            p = j * nx + i
            cells.append((p, p + 1, p + 1 + nx, p + nx))

    bnodes, normals = [], []
    for j in range(ny):
        for i in range(nx):
            n = np.zeros(2)
            if i == 0:
                n[0] -= 1.0
            if i == nx - 1:
                n[0] += 1.0
            if j == 0:
                n[1] -= 1.0
            if j == ny - 1:
                n[1] += 1.0
            if n.any():
                bnodes.append(j * nx + i)
                normals.append(n / np.linalg.norm(n))
    return SpatialDomain("grid2d", coords, np.asarray(cells, dtype=np.int64),
                         np.asarray(bnodes, dtype=np.int64), np.asarray(normals),
                         spacing=float(h), grid_shape=(nx, ny))


def _edge_faces(faces: np.ndarray) -> dict[tuple[int, int], list[int]]:
    edges: dict[tuple[int, int], list[int]] = {}
    for f, tri in enumerate(faces):
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (int(min(a, b)), int(max(a, b)))
            edges.setdefault(key, []).append(f)
    return edges


def mesh_domain(vertices, faces) -> SpatialDomain:
    """Assemble a ``trimesh`` domain; open edges define the boundary."""
    verts = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise MeshFormatError("vertices must be an (N, 3) array")
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshFormatError("face index out of range")
    edges = _edge_faces(faces)
    for key, inc in edges.items():
        if len(inc) > 2:
            raise MeshFormatError(f"non-manifold edge {key} shared by {len(inc)} triangles")

    open_edges = [(k, inc[0]) for k, inc in edges.items() if len(inc) == 1]
    acc: dict[int, np.ndarray] = {}
    for (a, b), f in open_edges:
        tri = faces[f]
        c = int(next(v for v in tri if v != a and v != b))
        e = verts[b] - verts[a]
        tri_n = np.cross(verts[tri[1]] - verts[tri[0]], verts[tri[2]] - verts[tri[0]])
        out = np.cross(e, tri_n)
        if np.dot(out, verts[c] - verts[a]) > 0:
            out = -out
        norm = np.linalg.norm(out)
        if norm == 0.0:
            raise DegenerateTriangleError(f"triangle {f} has zero area")
        out = out / norm
        for v in (a, b):
            acc[v] = acc.get(v, np.zeros(3)) + out
    bnodes = np.array(sorted(acc), dtype=np.int64)
    normals = np.array([acc[v] / np.linalg.norm(acc[v]) for v in bnodes]).reshape(-1, 3)
    return SpatialDomain("trimesh", verts, faces, bnodes, normals)


def load_mesh(path) -> SpatialDomain:
    """Read the ``nodes N faces F`` / ``v x y z`` / ``f i j k`` text format."""
    lines = Path(path).read_text().splitlines()
    body = [(n + 1, ln.split()) for n, ln in enumerate(lines) if ln.strip()]
    if not body:
        raise MeshFormatError("line 1: empty mesh file")
    lineno, head = body[0]
    if len(head) != 4 or head[0] != "nodes" or head[2] != "faces":
        raise MeshFormatError(f"line {lineno}: expected 'nodes <N> faces <F>'")
    try:
        n_nodes, n_faces = int(head[1]), int(head[3])
    except ValueError:
        raise MeshFormatError(f"line {lineno}: node/face counts must be integers") from None
    if len(body) - 1 != n_nodes + n_faces:
        raise MeshFormatError(
            f"line {body[-1][0]}: expected {n_nodes} vertex and {n_faces} face lines, "
            f"found {len(body) - 1} records")
    verts = np.empty((n_nodes, 3))
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for k, (lineno, tok) in enumerate(body[1:]):
        tag = "v" if k < n_nodes else "f"
        if len(tok) != 4 or tok[0] != tag:
            raise MeshFormatError(f"line {lineno}: expected '{tag}' record with 3 values")
        try:
            if tag == "v":
                verts[k] = [float(t) for t in tok[1:]]
            else:
                idx = [int(t) for t in tok[1:]]
                if min(idx) < 0 or max(idx) >= n_nodes:
                    raise MeshFormatError(
                        f"line {lineno}: face index out of range for {n_nodes} vertices")
                faces[k - n_nodes] = idx
        except ValueError as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError(f"line {lineno}: cannot parse '{' '.join(tok)}'") from None
    try:
        return mesh_domain(verts, faces)
    except MeshFormatError as exc:
        raise MeshFormatError(f"{path}: {exc}") from None


def save_mesh(domain: SpatialDomain, path) -> None:
    if domain.kind != "trimesh":
        raise ValueError("only trimesh domains can be written in mesh format")
    out = [f"nodes {domain.node_count} faces {len(domain.elements)}"]
    out += ["v " + " ".join(format(float(c), ".17g") for c in p) for p in domain.node_coords]
    out += ["f " + " ".join(str(int(i)) for i in f) for f in domain.elements]
    Path(path).write_text("\n".join(out) + "\n")


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and faces of a subdivided icosahedron (42 vertices at level 1)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return radius * np.array(verts), np.array(faces, dtype=np.int64)


def _grid_neighbor(i, j, di, dj, nx, ny):
    # Neumann mirror ghost: the node across the boundary reflects to the inside
    ii, jj = i + di, j + dj
    if ii < 0:
        ii = 1
    elif ii > nx - 1:
        ii = nx - 2
    if jj < 0:
        jj = 1
    elif jj > ny - 1:
        jj = ny - 2
    return jj * nx + ii


def _triangle_geometry(domain: SpatialDomain):
    X = domain.node_coords
    F = domain.elements
    p0, p1, p2 = X[F[:, 0]], X[F[:, 1]], X[F[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    area = 0.5 * np.linalg.norm(cross, axis=1)
    scale = max(np.ptp(X, axis=0).max(), 1e-300)
    bad = np.flatnonzero(area <= 1e-14 * scale ** 2)
    if bad.size:
        raise DegenerateTriangleError(f"triangle {int(bad[0])} has zero area")
    return p0, p1, p2, area


def cotangent_stiffness(domain: SpatialDomain) -> tuple[SparseOperator, np.ndarray]:
    """Symmetric cotangent edge weights and mixed-Voronoi vertex areas.

    The returned operator holds ``w_ij = max(0.5*(cot a + cot b), 1e-8)`` off the
    diagonal and ``-sum_j w_ij`` on it, so it is symmetric with zero row sums.
    """
    if domain.kind != "trimesh":
        raise ValueError("cotangent weights need a trimesh domain")
    p = _triangle_geometry(domain)
    pts, area = p[:3], p[3]
    F = domain.elements
    N = domain.node_count
    weights: dict[tuple[int, int], float] = {}
    vor = np.zeros(N)
    for f in range(len(F)):
        cots = np.empty(3)
        sq = np.empty(3)
        for k in range(3):
            a, b, c = pts[k][f], pts[(k + 1) % 3][f], pts[(k + 2) % 3][f]
            u, v = b - a, c - a
            cots[k] = np.dot(u, v) / (2.0 * area[f])      # angle at corner k
            sq[k] = np.dot(c - b, c - b)                    # squared opposite edge
        for k in range(3):
            i, j = int(F[f, (k + 1) % 3]), int(F[f, (k + 2) % 3])
            key = (min(i, j), max(i, j))
            weights[key] = weights.get(key, 0.0) + 0.5 * cots[k]
        obtuse = cots < 0
        for k in range(3):
            v = int(F[f, k])
            if obtuse.any():
                vor[v] += area[f] / 2.0 if obtuse[k] else area[f] / 4.0
            else:
                # edges adjacent to corner k are opposite corners k+1 and k+2
                vor[v] += (sq[(k + 1) % 3] * cots[(k + 1) % 3]
                           + sq[(k + 2) % 3] * cots[(k + 2) % 3]) / 8.0
    keys = sorted(weights)
    rows, cols, vals = [], [], []
    diag = np.zeros(N)
    for i, j in keys:
        w = max(weights[(i, j)], COT_FLOOR)
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
        diag[i] -= w
        diag[j] -= w
    rows += list(range(N))
    cols += list(range(N))
    vals += diag.tolist()
    return SparseOperator.from_triples((N, N), rows, cols, vals), vor


def laplacian_operator(domain: SpatialDomain) -> SparseOperator:
    """Discrete Laplacian (approximates the continuous one, rows sum to zero)."""
    N = domain.node_count
    if domain.kind == "grid2d":
        nx, ny = domain.grid_shape
        inv = 1.0 / domain.spacing ** 2
        rows, cols, vals = [], [], []
        for j in range(ny):
            for i in range(nx):
                r = j * nx + i
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rows.append(r)
                    cols.append(_grid_neighbor(i, j, di, dj, nx, ny))
                    vals.append(inv)
                rows.append(r)
                cols.append(r)
                vals.append(-4.0 * inv)
        return SparseOperator.from_triples((N, N), rows, cols, vals)

    stiff, areas = cotangent_stiffness(domain)
    off = stiff.rows != stiff.cols
    rows, cols = stiff.rows[off], stiff.cols[off]
    vals = stiff.vals[off] / areas[rows]
    diag = -np.bincount(rows, weights=vals, minlength=N)
    return SparseOperator.from_triples(
        (N, N), np.r_[rows, np.arange(N)], np.r_[cols, np.arange(N)], np.r_[vals, diag])


def boundary_gradient_operator(domain: SpatialDomain) -> SparseOperator:
    """Outward normal derivative at each boundary node (rows follow ``boundary_nodes``).

    Closed surfaces have no boundary and yield a 0 x N operator.
    """
    N = domain.node_count
    nb = domain.boundary_nodes.size
    if nb == 0:
        return SparseOperator.from_triples((0, N), [], [], [])
    rows, cols, vals = [], [], []
    if domain.kind == "grid2d":
        nx, ny = domain.grid_shape
        h = domain.spacing
        for r, (node, n) in enumerate(zip(domain.boundary_nodes, domain.boundary_normals)):
            i, j = int(node) % nx, int(node) // nx
            for axis, comp in enumerate(n):
                if comp == 0.0:
                    continue
                step = (1, nx)[axis]
                at_low = (i, j)[axis] == 0
                # one-sided difference pointing into the domain
                lo, hi = (node, node + step) if at_low else (node - step, node)
                rows += [r, r]
                cols += [int(hi), int(lo)]
                vals += [comp / h, -comp / h]
        return SparseOperator.from_triples((nb, N), rows, cols, vals)

    # open triangle mesh: area-weighted P1 gradients of the incident triangles
    X = domain.node_coords
    F = domain.elements
    p0, p1, p2, area = _triangle_geometry(domain)
    tri_n = np.cross(p1 - p0, p2 - p0)
    tri_n /= np.linalg.norm(tri_n, axis=1, keepdims=True)
    incident: dict[int, list[int]] = {}
    for f, tri in enumerate(F):
        for v in tri:
            incident.setdefault(int(v), []).append(f)
    for r, (node, n) in enumerate(zip(domain.boundary_nodes, domain.boundary_normals)):
        fs = incident[int(node)]
        wsum = sum(area[f] for f in fs)
        for f in fs:
            for k in range(3):
                opp = X[F[f, (k + 2) % 3]] - X[F[f, (k + 1) % 3]]
                grad_phi = np.cross(tri_n[f], opp) / (2.0 * area[f])
                rows.append(r)
                cols.append(int(F[f, k]))
                vals.append(area[f] / wsum * float(np.dot(n, grad_phi)))
    return SparseOperator.from_triples((nb, N), rows, cols, vals)


def edge_difference_operator(domain: SpatialDomain) -> SparseOperator:
    """One row per edge with ``(+1, -1) / length`` entries (first-order smoothness)."""
    X = domain.node_coords
    if domain.kind == "grid2d":
        nx, ny = domain.grid_shape
        pairs = []
        for j in range(ny):
            for i in range(nx):
                p = j * nx + i
                if i < nx - 1:
                    pairs.append((p, p + 1))
                if j < ny - 1:
                    pairs.append((p, p + nx))
    else:
        pairs = sorted(_edge_faces(domain.elements))
    pairs = np.asarray(pairs, dtype=np.int64)
    length = np.linalg.norm(X[pairs[:, 0]] - X[pairs[:, 1]], axis=1)
    E = len(pairs)
    r = np.repeat(np.arange(E), 2)
    c = pairs.ravel()
    v = np.column_stack([1.0 / length, -1.0 / length]).ravel()
    return SparseOperator.from_triples((E, domain.node_count), r, c, v)
