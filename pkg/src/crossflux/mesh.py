"""Admissible two-dimensional finite-volume meshes.

A mesh is a set of convex polygonal cells, each carrying a point ``x_K``
(its "center") such that the segment joining the centers of two
neighboring cells is orthogonal to their common edge.  The quantities
needed by a two-point flux approximation (transmissibilities, center
distances, dual diamond cells) are derived once at construction and the
mesh is read-only afterwards.

The text file format is::

    # crossflux-mesh v1
    vertices <n>
    x y
    ...
    cells <m>
    k v0 v1 ... v{k-1} cx cy
    ...
    boundary <b>
    va vb marker            # marker in {D, N}
"""
from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2
_KIND_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet", NEUMANN: "neumann"}
_MARKERS = {"D": DIRICHLET, "N": NEUMANN}

FORMAT_HEADER = "# crossflux-mesh v1"


class MeshError(ValueError):
    """Raised for malformed mesh input or admissibility violations."""

    def __init__(self, message, edge=None):
        super().__init__(message)
        self.edge = edge


def _frozen(a, dtype=float):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _signed_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(p - proj, axis=1)


class Mesh:
    """Admissible polygonal mesh with precomputed two-point flux geometry.

    Parameters
    ----------
    vertices : (nv, 2) array_like
        Vertex coordinates.
    cells : sequence of sequences of int
        Vertex ids of each cell in counter-clockwise order.
    centers : (nc, 2) array_like
        Cell points ``x_K``; validated, never recomputed.
    boundary_markers : dict
        Maps a boundary edge, given as a vertex pair in any order, to
        ``"D"`` or ``"N"``.

    Notes
    -----
    Edges are numbered in order of first appearance while walking the
    cells.  For an interior edge, ``edge_cells[e] = (K, L)`` with ``K``
    the first cell met; the stored normal points from ``K`` to ``L``.
    For boundary edges ``edge_cells[e, 1] == -1`` and the normal is the
    outward normal of ``K``.
    """

    def __init__(self, vertices, cells, centers, boundary_markers):
        vertices = np.asarray(vertices, dtype=float)
        centers = np.asarray(centers, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (n, 2)")
        if centers.shape != (len(cells), 2):
            raise MeshError("one center per cell is required")
        nv = len(vertices)

        self.vertices = _frozen(vertices)
        self.cells = tuple(tuple(int(v) for v in c) for c in cells)
        self.centers = _frozen(centers)

        area = np.empty(len(self.cells))
        diam = np.empty(len(self.cells))
        edge_id = {}
        ev, ec = [], []
        for k, cell in enumerate(self.cells):
            if len(cell) < 3:
                raise MeshError(f"cell {k} has fewer than 3 vertices")
            if min(cell) < 0 or max(cell) >= nv:
                raise MeshError(f"cell {k} references an unknown vertex")
            poly = vertices[list(cell)]
            area[k] = _signed_area(poly)
            if area[k] <= 0.0:
                raise MeshError(f"cell {k} is degenerate or not counter-clockwise")
            diam[k] = max(np.linalg.norm(poly[i] - poly[j])
                          for i in range(len(cell)) for j in range(i + 1, len(cell)))
            for a, b in zip(cell, cell[1:] + cell[:1]):
                key = (a, b) if a < b else (b, a)
                e = edge_id.get(key)
                if e is None:
                    edge_id[key] = len(ev)
                    ev.append((a, b))
                    ec.append([k, -1])
                elif ec[e][1] == -1 and ev[e] == (b, a):
                    ec[e][1] = k
                else:
                    raise MeshError(f"edge {key} is shared inconsistently", edge=e)

        edge_vertices = np.array(ev, dtype=np.int64).reshape(-1, 2)
        edge_cells = np.array(ec, dtype=np.int64).reshape(-1, 2)
        ne = len(edge_vertices)

        kind = np.full(ne, INTERIOR, dtype=np.int8)
        boundary = edge_cells[:, 1] == -1
        seen = set()
        for (a, b), marker in boundary_markers.items():
            key = (a, b) if a < b else (b, a)
            e = edge_id.get(key)
            if e is None or not boundary[e]:
                raise MeshError(f"marker on {key}, which is not a boundary edge")
            if key in seen:
                raise MeshError(f"boundary edge {key} is marked twice", edge=e)
            if marker not in _MARKERS:
                raise MeshError(f"unknown boundary marker {marker!r} on {key}", edge=e)
            seen.add(key)
            kind[e] = _MARKERS[marker]
        missing = np.flatnonzero(boundary & (kind == INTERIOR))
        if len(missing):
            e = int(missing[0])
            raise MeshError(f"boundary edge {e} {tuple(edge_vertices[e])} has no marker", edge=e)

        pa = vertices[edge_vertices[:, 0]]
        pb = vertices[edge_vertices[:, 1]]
        tangent = pb - pa
        measure = np.linalg.norm(tangent, axis=1)
        # cell K walks a->b counter-clockwise, so (t_y, -t_x) points out of K
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) / measure[:, None]

        xK = centers[edge_cells[:, 0]]
        dist = np.empty(ne)
        inner = ~boundary
        xL = centers[edge_cells[inner, 1]]
        dist[inner] = np.linalg.norm(xL - xK[inner], axis=1)
        dist[boundary] = _point_segment_distance(xK[boundary], pa[boundary], pb[boundary])
        if np.any(dist <= 0.0):
            e = int(np.flatnonzero(dist <= 0.0)[0])
            raise MeshError(f"edge {e} has zero center distance", edge=e)

        # diamonds: {x_K, a, x_L, b} for interior edges, {x_K, a, b} on the boundary
        dual = np.empty(ne)
        cross = lambda u, v: u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]  # noqa: E731
        dual[boundary] = 0.5 * np.abs(cross(pa[boundary] - xK[boundary], pb[boundary] - xK[boundary]))
        xk, a, b = xK[inner], pa[inner], pb[inner]
        dual[inner] = 0.5 * np.abs(cross(xk, a) + cross(a, xL) + cross(xL, b) + cross(b, xk))

        self.cell_measure = _frozen(area)
        self.cell_diameter = _frozen(diam)
        self.edge_vertices = _frozen(edge_vertices, np.int64)
        self.edge_cells = _frozen(edge_cells, np.int64)
        self.edge_kind = _frozen(kind, np.int8)
        self.edge_measure = _frozen(measure)
        self.edge_distance = _frozen(dist)
        self.transmissibility = _frozen(measure / dist)
        self.normal = _frozen(normal)
        self.dual_measure = _frozen(dual)

        self.interior = _frozen(np.flatnonzero(kind == INTERIOR), np.int64)
        self.dirichlet = _frozen(np.flatnonzero(kind == DIRICHLET), np.int64)
        self.neumann = _frozen(np.flatnonzero(kind == NEUMANN), np.int64)
        dpos = np.full(ne, -1, dtype=np.int64)
        dpos[self.dirichlet] = np.arange(len(self.dirichlet))
        self.dirichlet_position = _frozen(dpos, np.int64)
        self._edge_index = edge_id

    # -- basic queries -------------------------------------------------
    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edge_vertices)

    @property
    def n_dirichlet(self):
        return len(self.dirichlet)

    @property
    def measure(self):
        """Total measure of the domain."""
        return float(self.cell_measure.sum())

    @property
    def h(self):
        """Mesh size, the largest cell diameter."""
        return float(self.cell_diameter.max())

    @property
    def edge_midpoints(self):
        return 0.5 * (self.vertices[self.edge_vertices[:, 0]] + self.vertices[self.edge_vertices[:, 1]])

    def edge_kind_name(self, e):
        return _KIND_NAMES[int(self.edge_kind[e])]

    def find_edge(self, a, b):
        """Edge id joining vertices ``a`` and ``b``."""
        return self._edge_index[(a, b) if a < b else (b, a)]

    def boundary_markers(self):
        out = {}
        for e in np.concatenate([self.dirichlet, self.neumann]):
            a, b = self.edge_vertices[e]
            out[(int(a), int(b))] = "D" if self.edge_kind[e] == DIRICHLET else "N"
        return out

    def laplacian(self, dirichlet=False):
        """Two-point Laplacian ``sum_sigma tau_sigma (v_K - v_L)`` as a CSR matrix.

        With ``dirichlet=True`` the Dirichlet edges add ``tau_sigma`` to the
        diagonal (homogeneous traces); Neumann edges never contribute.
        """
        K, L = self.edge_cells[self.interior].T
        t = self.transmissibility[self.interior]
        n = self.n_cells
        rows = np.concatenate([K, L, K, L])
        cols = np.concatenate([K, L, L, K])
        vals = np.concatenate([t, t, -t, -t])
        if dirichlet and self.n_dirichlet:
            Kd = self.edge_cells[self.dirichlet, 0]
            rows = np.concatenate([rows, Kd])
            cols = np.concatenate([cols, Kd])
            vals = np.concatenate([vals, self.transmissibility[self.dirichlet]])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def to_text(self):
        buf = io.StringIO()
        buf.write(FORMAT_HEADER + "\n")
        buf.write(f"vertices {len(self.vertices)}\n")
        for x, y in self.vertices.tolist():
            buf.write(f"{x!r} {y!r}\n")
        buf.write(f"cells {self.n_cells}\n")
        for cell, (cx, cy) in zip(self.cells, self.centers.tolist()):
            buf.write(f"{len(cell)} {' '.join(map(str, cell))} {cx!r} {cy!r}\n")
        bnd = np.concatenate([self.dirichlet, self.neumann])
        bnd.sort()
        buf.write(f"boundary {len(bnd)}\n")
        for e in bnd:
            a, b = self.edge_vertices[e]
            buf.write(f"{a} {b} {'D' if self.edge_kind[e] == DIRICHLET else 'N'}\n")
        return buf.getvalue()

    def digest(self):
        """SHA-256 of the canonical text serialization."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (self.cells == other.cells
                and np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.centers, other.centers)
                and np.array_equal(self.edge_kind, other.edge_kind)
                and np.array_equal(self.edge_vertices, other.edge_vertices))

    __hash__ = None

    def __repr__(self):
        return (f"Mesh(cells={self.n_cells}, edges={self.n_edges}, interior={len(self.interior)}, "
                f"dirichlet={self.n_dirichlet}, neumann={len(self.neumann)})")


@dataclass
class CellField:
    """Piecewise-constant function on a mesh, with optional Dirichlet traces.

    ``traces`` is aligned with ``mesh.dirichlet``.
    """

    values: np.ndarray
    traces: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.traces is not None:
            self.traces = np.asarray(self.traces, dtype=float)

    def check(self, mesh):
        if self.values.shape != (mesh.n_cells,):
            raise ValueError(f"field has {self.values.shape} values for {mesh.n_cells} cells")
        if self.traces is not None and self.traces.shape != (mesh.n_dirichlet,):
            raise ValueError(f"field has {self.traces.shape} traces for {mesh.n_dirichlet} Dirichlet edges")
        return self


@dataclass
class AdmissibilityReport:
    passed: bool
    worst_orthogonality: float
    worst_edge: int | None
    zeta: float
    zeta_edge: int | None
    inverted_edges: list = field(default_factory=list)
    tol: float = 1e-10

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        msg = (f"{status}: max |cos| defect {self.worst_orthogonality:.3e} (edge {self.worst_edge}), "
               f"zeta {self.zeta:.6g} (edge {self.zeta_edge}), tol {self.tol:g}")
        if self.inverted_edges:
            msg += f", {len(self.inverted_edges)} inverted edges (first {self.inverted_edges[0]})"
        return msg


def check_admissibility(mesh, tol=1e-10):
    """Measure how far a mesh is from admissibility.

    Returns the worst orthogonality defect ``|cos theta|`` between
    ``x_K x_L`` and the edge, the regularity constant
    ``zeta = min d(x_K, sigma) / d_sigma`` over all cell-edge pairs, and the
    edges whose centers lie on the wrong side.  Never raises.
    """
    V, C = mesh.vertices, mesh.centers
    ev, ec = mesh.edge_vertices, mesh.edge_cells
    pa, pb = V[ev[:, 0]], V[ev[:, 1]]
    tangent = pb - pa
    inner = mesh.interior

    worst, worst_edge = 0.0, None
    inverted = []
    if len(inner):
        d = C[ec[inner, 1]] - C[ec[inner, 0]]
        cos = np.abs(np.einsum("ij,ij->i", d, tangent[inner]))
        cos /= np.linalg.norm(d, axis=1) * mesh.edge_measure[inner]
        i = int(np.argmax(cos))
        worst, worst_edge = float(cos[i]), int(inner[i])
        side = np.einsum("ij,ij->i", d, mesh.normal[inner])
        inverted += [int(e) for e in inner[side <= 0.0]]
    bnd = np.concatenate([mesh.dirichlet, mesh.neumann])
    if len(bnd):
        side = np.einsum("ij,ij->i", pa[bnd] - C[ec[bnd, 0]], mesh.normal[bnd])
        inverted += [int(e) for e in bnd[side <= 0.0]]

    # ratios d(x_K, sigma) / d_sigma seen from each side of each edge
    ratios, owners = [], []
    for side in (0, 1):
        e = np.flatnonzero(ec[:, side] >= 0)
        dk = _point_segment_distance(C[ec[e, side]], pa[e], pb[e])
        ratios.append(dk / mesh.edge_distance[e])
        owners.append(e)
    ratios = np.concatenate(ratios)
    owners = np.concatenate(owners)
    i = int(np.argmin(ratios))
    zeta, zeta_edge = float(ratios[i]), int(owners[i])

    passed = worst <= tol and zeta > 0.0 and not inverted
    return AdmissibilityReport(passed, worst, worst_edge, zeta, zeta_edge, sorted(set(inverted)), tol)


def validate(mesh, tol=1e-10):
    """Raise :class:`MeshError` naming the offending edge unless admissible."""
    rep = check_admissibility(mesh, tol)
    if rep.inverted_edges:
        e = rep.inverted_edges[0]
        raise MeshError(f"edge {e}: cell center on the wrong side of the edge", edge=e)
    if rep.worst_orthogonality > tol:
        raise MeshError(f"edge {rep.worst_edge}: orthogonality defect {rep.worst_orthogonality:.3e} "
                        f"exceeds tolerance {tol:g}", edge=rep.worst_edge)
    if rep.zeta <= 0.0:
        raise MeshError(f"edge {rep.zeta_edge}: regularity constant zeta <= 0", edge=rep.zeta_edge)
    return rep


# -- construction ---------------------------------------------------------

_SIDES = ("left", "right", "bottom", "top")


def build_structured_mesh(nx, ny, rect=(0.0, 1.0, 0.0, 1.0), markers=None):
    """Uniform rectangular mesh of ``rect = (x0, x1, y0, y1)``.

    ``markers`` maps ``left``/``right``/``bottom``/``top`` to ``"D"`` or
    ``"N"`` (Neumann by default).  Cells are numbered with x running
    fastest; centers are the cell centroids.
    """
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    x0, x1, y0, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0 and np.isfinite([x0, x1, y0, y1]).all()):
        raise MeshError(f"degenerate rectangle {rect}")
    markers = {s: "N" for s in _SIDES} | dict(markers or {})
    unknown = set(markers) - set(_SIDES)
    if unknown:
        raise MeshError(f"unknown sides {sorted(unknown)}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    vid = lambda i, j: j * (nx + 1) + i  # noqa: E731

    cells, centers = [], []
    for j in range(ny):
        for i in range(nx):
            cells.append((vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)))
            centers.append((0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])))

    bm = {}
    for i in range(nx):
        bm[(vid(i, 0), vid(i + 1, 0))] = markers["bottom"]
        bm[(vid(i, ny), vid(i + 1, ny))] = markers["top"]
    for j in range(ny):
        bm[(vid(0, j), vid(0, j + 1))] = markers["left"]
        bm[(vid(nx, j), vid(nx, j + 1))] = markers["right"]
    return Mesh(vertices, cells, np.array(centers), bm)


def circumcenter(a, b, c):
    """Circumcenters of triangles given row-wise by vertex arrays."""
    a, b, c = np.atleast_2d(a), np.atleast_2d(b), np.atleast_2d(c)
    bx, by = (b - a).T
    cx, cy = (c - a).T
    d = 2.0 * (bx * cy - by * cx)
    b2, c2 = bx * bx + by * by, cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    return a + np.column_stack([ux, uy])


def refine(mesh):
    """Regular four-way refinement of a triangle or rectangle mesh.

    Triangles are split at edge midpoints into four similar triangles
    (centers: circumcenters); quadrilaterals additionally receive their
    centroid as a vertex (centers: centroids, admissible for rectangles).

    Returns
    -------
    fine : Mesh
    parent : (4 * nc,) int ndarray
        Coarse cell of every fine cell.
    """
    V = [tuple(v) for v in mesh.vertices]
    mid = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in mid:
            mid[key] = len(V)
            V.append(tuple(0.5 * (mesh.vertices[a] + mesh.vertices[b])))
        return mid[key]

    cells, centers, parent = [], [], []
    for k, cell in enumerate(mesh.cells):
        if len(cell) == 3:
            a, b, c = cell
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            kids = [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        elif len(cell) == 4:
            a, b, c, d = cell
            ab, bc, cd, da = midpoint(a, b), midpoint(b, c), midpoint(c, d), midpoint(d, a)
            m = len(V)
            V.append(tuple(mesh.vertices[list(cell)].mean(axis=0)))
            kids = [(a, ab, m, da), (ab, b, bc, m), (m, bc, c, cd), (da, m, cd, d)]
        else:
            raise MeshError(f"cannot refine a {len(cell)}-gon (cell {k})")
        cells.extend(kids)
        parent.extend([k] * 4)

    Va = np.array(V)
    for kid in cells:
        p = Va[list(kid)]
        centers.append(circumcenter(*p)[0] if len(kid) == 3 else p.mean(axis=0))

    bm = {}
    for e in np.concatenate([mesh.dirichlet, mesh.neumann]):
        a, b = map(int, mesh.edge_vertices[e])
        marker = "D" if mesh.edge_kind[e] == DIRICHLET else "N"
        m = mid[(a, b) if a < b else (b, a)]
        bm[(a, m)] = marker
        bm[(m, b)] = marker
    return Mesh(Va, cells, np.array(centers), bm), np.array(parent, dtype=np.int64)


# -- file IO --------------------------------------------------------------

def save_mesh(mesh, path):
    Path(path).write_text(mesh.to_text(), encoding="utf-8")


def parse_mesh(text, validate_tol=1e-10):
    """Parse the text format; see :func:`load_mesh`."""
    lines = []
    for raw in text.splitlines():
        s = raw.split("#", 1)[0].strip()
        if s:
            lines.append(s)
    pos = 0

    def section(name):
        nonlocal pos
        if pos >= len(lines):
            raise MeshError(f"missing '{name}' section")
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshError(f"expected '{name} <count>', got {lines[pos]!r}")
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshError(f"bad count in {lines[pos]!r}") from None
        if count < 0 or pos + 1 + count > len(lines):
            raise MeshError(f"section '{name}' is truncated")
        body = lines[pos + 1: pos + 1 + count]
        pos += 1 + count
        return body

    try:
        vertices = [tuple(float(t) for t in ln.split()) for ln in section("vertices")]
        if any(len(v) != 2 for v in vertices):
            raise MeshError("vertex lines need exactly two coordinates")
        cells, centers = [], []
        for ln in section("cells"):
            t = ln.split()
            k = int(t[0])
            if len(t) != k + 3:
                raise MeshError(f"cell line {ln!r} does not match its vertex count")
            cells.append(tuple(int(v) for v in t[1:k + 1]))
            centers.append((float(t[k + 1]), float(t[k + 2])))
        markers = {}
        for ln in section("boundary"):
            t = ln.split()
            if len(t) != 3:
                raise MeshError(f"boundary line {ln!r} needs 'va vb marker'")
            key = (int(t[0]), int(t[1]))
            if key in markers or key[::-1] in markers:
                raise MeshError(f"boundary edge {key} listed twice")
            markers[key] = t[2]
    except ValueError as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"parse error: {exc}") from None
    if pos != len(lines):
        raise MeshError(f"unexpected trailing content: {lines[pos]!r}")

    mesh = Mesh(np.array(vertices, dtype=float).reshape(-1, 2), cells,
                np.array(centers, dtype=float).reshape(-1, 2), markers)
    if validate_tol is not None:
        validate(mesh, validate_tol)
    return mesh


def load_mesh(path, tol=1e-10):
    """Read a mesh file and validate admissibility.

    Raises
    ------
    MeshError
        On malformed input, or naming the first offending edge when the
        mesh is not admissible at orthogonality tolerance ``tol``.
    """
    return parse_mesh(Path(path).read_text(encoding="utf-8"), validate_tol=tol)


# -- discrete calculus ----------------------------------------------------

def diff(field, mesh, edge, cell=None):
    """``D_{K,sigma}(v) = v_{K,sigma} - v_K`` seen from ``cell`` (default: K).

    Interior edges use the neighbor value, Dirichlet edges the trace, and
    Neumann edges return zero.
    """
    K, L = mesh.edge_cells[edge]
    if cell is None:
        cell = K
    if cell not in (K, L):
        raise ValueError(f"cell {cell} is not adjacent to edge {edge}")
    v = field.values
    kind = mesh.edge_kind[edge]
    if kind == INTERIOR:
        other = L if cell == K else K
        return float(v[other] - v[cell])
    if kind == NEUMANN:
        return 0.0
    if field.traces is None:
        raise ValueError(f"Dirichlet edge {edge} requires a trace value")
    return float(field.traces[mesh.dirichlet_position[edge]] - v[cell])


def discrete_h1_norm(field, mesh):
    """``sqrt(sum_int tau (v_K - v_L)^2 + sum_K m(K) v_K^2)``."""
    v = np.asarray(getattr(field, "values", field), dtype=float)
    K, L = mesh.edge_cells[mesh.interior].T
    grad = np.dot(mesh.transmissibility[mesh.interior], (v[K] - v[L]) ** 2)
    return float(np.sqrt(grad + np.dot(mesh.cell_measure, v * v)))


def h1_matrix(mesh):
    """Matrix of the squared discrete H1 norm."""
    return (mesh.laplacian() + sp.diags(mesh.cell_measure)).tocsc()


def discrete_hminus1_norm(field, mesh, _lu=None):
    """Dual norm of ``field`` with respect to the discrete H1 norm.

    Equal to ``sqrt((Mv)^T A^{-1} (Mv))`` where ``A`` is the H1 matrix and
    ``M`` the diagonal of cell measures.
    """
    v = np.asarray(getattr(field, "values", field), dtype=float)
    mv = mesh.cell_measure * v
    if not np.any(mv):
        return 0.0
    lu = _lu if _lu is not None else spla.splu(h1_matrix(mesh))
    x = lu.solve(mv)
    return float(np.sqrt(max(np.dot(mv, x), 0.0)))


def discrete_gradient(field, mesh):
    """Diamond-cell gradient, one vector per edge.

    On ``T_KL`` the value is ``m(sigma) (v_L - v_K) / m(T_KL) n_KL``; boundary
    diamonds carry zero.
    """
    v = np.asarray(getattr(field, "values", field), dtype=float)
    g = np.zeros((mesh.n_edges, 2))
    e = mesh.interior
    K, L = mesh.edge_cells[e].T
    scale = mesh.edge_measure[e] * (v[L] - v[K]) / mesh.dual_measure[e]
    g[e] = scale[:, None] * mesh.normal[e]
    return g
