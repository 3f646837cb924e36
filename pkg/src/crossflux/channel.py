"""Hourglass ion-channel geometry and its acute triangulation.

The channel is two funnel-shaped reservoirs joined by a straight neck, in
coordinates scaled so that ``0 <= x <= 1``.  The left and right vertical
ends carry Dirichlet markers, every other boundary edge is Neumann.

The coarse mesh comes from a force-based point relaxation followed by
Delaunay triangulation; it is accepted only if every triangle is strictly
acute, so that circumcenters give an admissible mesh.  Regular four-way
refinement keeps the triangle shapes, hence admissibility, at every level.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

from .mesh import Mesh, MeshError, circumcenter, refine, validate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelGeometry:
    """Proportions of the schematic channel (reservoir 3 : neck 0.6 : length 4.5)."""

    length: float = 1.0
    reservoir_height: float = 2.0 / 3.0
    neck_bottom: float = 4.0 / 15.0
    neck_top: float = 2.0 / 5.0
    neck_start: float = 1.0 / 3.0
    neck_end: float = 2.0 / 3.0

    def polygon(self):
        """Counter-clockwise boundary polygon."""
        L, H = self.length, self.reservoir_height
        return np.array([
            (0.0, 0.0), (self.neck_start, self.neck_bottom), (self.neck_end, self.neck_bottom),
            (L, 0.0), (L, H), (self.neck_end, self.neck_top), (self.neck_start, self.neck_top),
            (0.0, H),
        ])

    def area(self):
        P = self.polygon()
        x, y = P[:, 0], P[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments(poly):
    return poly, np.roll(poly, -1, axis=0)


def _inside(p, poly):
    x, y = p[:, 0:1], p[:, 1:2]
    a, b = _segments(poly)
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
    crosses = ((ay > y) != (by > y)) & (x < (bx - ax) * (y - ay) / (by - ay + 1e-300) + ax)
    return np.count_nonzero(crosses, axis=1) % 2 == 1


def _nearest_on_boundary(p, poly):
    a, b = _segments(poly)
    ab = b - a
    t = np.einsum("pij,ij->pi", p[:, None, :] - a[None], ab) / np.einsum("ij,ij->i", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    q = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(p[:, None, :] - q, axis=2)
    j = np.argmin(d, axis=1)
    idx = np.arange(len(p))
    return q[idx, j], d[idx, j]


def _signed_distance(p, poly):
    _, d = _nearest_on_boundary(p, poly)
    return np.where(_inside(p, poly), -d, d)


def _max_angles(P, tri):
    a, b, c = P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    s = np.sort(np.column_stack([la, lb, lc]), axis=1)
    cos = (s[:, 0] ** 2 + s[:, 1] ** 2 - s[:, 2] ** 2) / (2 * s[:, 0] * s[:, 1])
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def _relax(poly, h0, iters=400, seed_shift=0.0):
    """Force-based point relaxation inside ``poly`` with uniform target size ``h0``."""
    geps = 1e-3 * h0
    xmin, ymin = poly.min(axis=0)
    xmax, ymax = poly.max(axis=0)
    ys = np.arange(ymin, ymax + h0, h0 * np.sqrt(3) / 2)
    pts = []
    for r, y in enumerate(ys):
        xs = np.arange(xmin + seed_shift * h0, xmax + h0, h0) + (r % 2) * h0 / 2
        pts.append(np.column_stack([xs, np.full_like(xs, y)]))
    p = np.vstack(pts)
    p = p[_signed_distance(p, poly) < -0.3 * h0]
    fixed = poly.copy()
    # seed boundary nodes at spacing ~h0 so that every boundary edge is recovered
    bnd = []
    for a, b in zip(*_segments(poly)):
        n = max(1, int(round(np.linalg.norm(b - a) / h0)))
        t = np.linspace(0.0, 1.0, n + 1)[1:-1]
        bnd.append(a + t[:, None] * (b - a))
    p = np.vstack([fixed] + bnd + [p])
    nfix = len(fixed)

    p_last = np.full_like(p, np.inf)
    for it in range(iters):
        if np.max(np.linalg.norm(p - p_last, axis=1)) > 0.1 * h0:
            p_last = p.copy()
            tri = Delaunay(p).simplices
            cent = p[tri].mean(axis=1)
            tri = tri[_signed_distance(cent, poly) < -geps]
            bars = np.sort(np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [0, 2]]]), axis=1)
            bars = np.unique(bars, axis=0)
        vec = p[bars[:, 0]] - p[bars[:, 1]]
        L = np.linalg.norm(vec, axis=1)
        L0 = 1.2 * np.sqrt(np.sum(L ** 2) / len(L))
        F = np.maximum(L0 - L, 0.0)
        Fvec = (F / L)[:, None] * vec
        Ftot = np.zeros_like(p)
        np.add.at(Ftot, bars[:, 0], Fvec)
        np.add.at(Ftot, bars[:, 1], -Fvec)
        Ftot[:nfix] = 0.0
        move = 0.2 * Ftot
        p = p + move
        outside = ~_inside(p, poly)
        if outside.any():
            p[outside] = _nearest_on_boundary(p[outside], poly)[0]
        p[:nfix] = fixed
        if np.max(np.linalg.norm(move[nfix:], axis=1)) < 1e-4 * h0:
            break
    return p


def _triangulate(p, poly):
    tri = Delaunay(p).simplices
    cent = p[tri].mean(axis=1)
    tri = tri[_inside(cent, poly)]
    # counter-clockwise orientation
    a, b, c = p[tri[:, 0]], p[tri[:, 1]], p[tri[:, 2]]
    cw = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]) < 0
    tri[cw] = tri[cw][:, [0, 2, 1]]
    used = np.unique(tri)
    remap = np.full(len(p), -1)
    remap[used] = np.arange(len(used))
    return p[used], remap[tri]


def coarse_channel_mesh(target_cells=256, geometry=ChannelGeometry(), max_angle=88.0):
    """Acute triangulation of the channel with roughly ``target_cells`` triangles.

    Raises
    ------
    MeshError
        If no strictly acute mesh is found near the requested size.
    """
    poly = geometry.polygon()
    h_nominal = np.sqrt(geometry.area() / (target_cells * np.sqrt(3) / 4))
    best, closest = None, None
    for scale in (1.0, 0.98, 1.02, 0.96, 1.04, 0.94, 1.06):
        for shift in (0.0, 0.25, 0.5, 0.75):
            p = _relax(poly, h_nominal * scale, seed_shift=shift)
            P, tri = _triangulate(p, poly)
            if not np.isclose(_area(P, tri), geometry.area(), rtol=1e-10):
                continue
            worst = float(_max_angles(P, tri).max())
            if best is None or worst < best:
                best = worst
            if worst < max_angle:
                gap = abs(len(tri) - target_cells)
                if closest is None or gap < closest[0]:
                    closest = (gap, worst, P, tri)
        if closest is not None and closest[0] <= 0.05 * target_cells:
            break
    if closest is None:
        raise MeshError(f"no acute channel triangulation found (best max angle {best})")
    _, worst, P, tri = closest
    logger.info("channel mesh: %d triangles, max angle %.2f deg", len(tri), worst)
    return _assemble(P, tri, geometry)


def _area(P, tri):
    a, b, c = P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]]
    return 0.5 * float(np.sum((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                              - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])))


def _assemble(P, tri, geometry):
    centers = circumcenter(P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]])
    count = {}
    for t in tri:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            count[key] = count.get(key, 0) + 1
    markers = {}
    for (a, b), c in count.items():
        if c == 1:
            on_end = (P[a, 0] == P[b, 0]) and P[a, 0] in (0.0, geometry.length)
            markers[(int(a), int(b))] = "D" if on_end else "N"
    mesh = Mesh(P, tri.tolist(), centers, markers)
    validate(mesh)
    return mesh


def channel_mesh(level=0, base_cells=256, geometry=ChannelGeometry(), return_parents=False):
    """Channel mesh after ``level`` regular refinements of the coarse mesh.

    With ``return_parents`` the list of child-to-parent maps (one per
    refinement, coarsest first) is returned as well.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    mesh = coarse_channel_mesh(base_cells, geometry)
    parents = []
    for _ in range(level):
        mesh, parent = refine(mesh)
        parents.append(parent)
    return (mesh, parents) if return_parents else mesh
