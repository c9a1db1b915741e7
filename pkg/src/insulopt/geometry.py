"""Convex polygons, P1 triangulations and boundary graphs in the plane.

All objects are immutable after construction. Coordinates are stored as
read-only ``float64`` arrays so a mesh can be shared freely between threads
and worker processes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay

from .errors import (
    DegenerateGeometry,
    InvalidArgument,
    InvalidMesh,
    MeshQualityFailure,
)

DEFAULT_C_USR = 8.0
MAX_ASPECT_RATIO = 1e3
SMOOTHING_PASSES = 3

# sin of the smallest accepted turning angle at a polygon vertex
_TURN_EPS = 1e-10


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    """Strictly convex polygon with counter-clockwise vertices.

    The closing edge from the last to the first vertex is implicit.
    """

    vertices: np.ndarray
    dim = 2

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise InvalidArgument("vertices must have shape (n, 2)")
        if len(v) < 3:
            raise InvalidArgument("a polygon needs at least 3 vertices")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("vertices must be finite")
        e = np.roll(v, -1, axis=0) - v
        lengths = np.hypot(e[:, 0], e[:, 1])
        if np.any(lengths == 0.0):
            raise DegenerateGeometry("repeated vertex (polygon must not be explicitly closed)")
        turn = _cross2(np.roll(e, 1, axis=0), e)
        if np.any(turn <= _TURN_EPS * np.roll(lengths, 1) * lengths):
            raise DegenerateGeometry("vertices are not a strictly convex counter-clockwise cycle")
        object.__setattr__(self, "vertices", _readonly(v))

    @property
    def n(self):
        return len(self.vertices)

    @cached_property
    def edge_lengths(self):
        e = np.roll(self.vertices, -1, axis=0) - self.vertices
        return np.hypot(e[:, 0], e[:, 1])

    @cached_property
    def area(self):
        v = self.vertices
        return 0.5 * float(np.sum(_cross2(v, np.roll(v, -1, axis=0))))

    @cached_property
    def perimeter(self):
        return float(np.sum(self.edge_lengths))

    @cached_property
    def centroid(self):
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        cr = _cross2(v, w)
        return np.sum((v + w) * cr[:, None], axis=0) / (6.0 * self.area)

    @cached_property
    def diameter(self):
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt(np.max(np.sum(d * d, axis=-1))))

    @cached_property
    def width(self):
        """Minimal width, attained orthogonal to one of the edges."""
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        nrm = np.stack([e[:, 1], -e[:, 0]], axis=1) / self.edge_lengths[:, None]
        # distance of every vertex to every edge line; outward normal => negative inside
        dist = -((v[None, :, :] - v[:, None, :]) * nrm[:, None, :]).sum(-1)
        return float(np.min(np.max(dist, axis=1)))

    @property
    def aspect_ratio(self):
        return self.diameter / self.width

    def inner_distance(self, pts):
        """Distance of points to the boundary, positive inside."""
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        nrm = np.stack([e[:, 1], -e[:, 0]], axis=1) / self.edge_lengths[:, None]
        pts = np.atleast_2d(pts)
        d = -((pts[:, None, :] - v[None, :, :]) * nrm[None, :, :]).sum(-1)
        return d.min(axis=1)

    def scaled(self, t):
        return ConvexPolygon(self.vertices * t)

    def second_moments(self):
        """Principal second moments of area about the centroid (ascending)."""
        v = self.vertices - self.centroid
        w = np.roll(v, -1, axis=0)
        cr = _cross2(v, w)
        ixx = np.sum(cr * (v[:, 1] ** 2 + v[:, 1] * w[:, 1] + w[:, 1] ** 2)) / 12.0
        iyy = np.sum(cr * (v[:, 0] ** 2 + v[:, 0] * w[:, 0] + w[:, 0] ** 2)) / 12.0
        ixy = np.sum(cr * (v[:, 0] * w[:, 1] + 2 * v[:, 0] * v[:, 1]
                           + 2 * w[:, 0] * w[:, 1] + w[:, 0] * v[:, 1])) / 24.0
        return np.linalg.eigvalsh(np.array([[iyy, ixy], [ixy, ixx]]))

    def isoperimetric_ratio(self):
        """P^2 / (4 pi A); equals 1 only for the disk."""
        return self.perimeter ** 2 / (4.0 * math.pi * self.area)

    def max_turning_angle(self):
        e = np.roll(self.vertices, -1, axis=0) - self.vertices
        prev = np.roll(e, 1, axis=0)
        ang = np.arctan2(_cross2(prev, e), np.sum(prev * e, axis=1))
        return float(np.max(ang))


def make_regular_polygon(n, r, center=(0.0, 0.0)):
    """Regular ``n``-gon inscribed in the circle of radius ``r``."""
    if int(n) != n or n < 3:
        raise InvalidArgument("n must be an integer >= 3")
    if not r > 0:
        raise InvalidArgument("radius must be positive")
    theta = 2.0 * np.pi * np.arange(int(n)) / int(n)
    v = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1) + np.asarray(center, float)
    return ConvexPolygon(v)


def convexity_project(points):
    """Convex hull of a planar point set as a strictly convex CCW polygon.

    Monotone chain; points on hull edges are discarded. The first vertex is
    the lexicographically smallest point, so the map is idempotent vertex for
    vertex.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise InvalidArgument("need at least 3 points of shape (n, 2)")
    pts = np.unique(pts, axis=0)  # lexicographic sort, duplicates removed

    def half(seq):
        chain = []
        for p in seq:
            while len(chain) >= 2:
                a, b = chain[-2], chain[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) <= 0.0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    hull = half(pts)[:-1] + half(pts[::-1])[:-1]
    # drop nearly collinear vertices afterwards; doing it inside the chain
    # could discard an extreme point instead of the middle one
    while len(hull) >= 3:
        v = np.array(hull)
        e = np.roll(v, -1, axis=0) - v
        le = np.hypot(e[:, 0], e[:, 1])
        # same relative test as ConvexPolygon
        turn = _cross2(np.roll(e, 1, axis=0), e) / (np.roll(le, 1) * le)
        k = int(np.argmin(turn))
        if turn[k] > _TURN_EPS:
            break
        del hull[k]
    if len(hull) < 3:
        raise DegenerateGeometry("points are collinear")
    hull = np.array(hull)
    first = np.lexsort((hull[:, 1], hull[:, 0]))[0]
    return ConvexPolygon(np.roll(hull, -first, axis=0))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming P1 triangulation of a convex polygon.

    ``boundary`` lists the boundary node indices once around the domain in
    counter-clockwise order. ``quality`` is the worst ratio h_T / rho_T.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        x = _readonly(self.nodes)
        t = _readonly(self.triangles, dtype=np.int64)
        b = _readonly(self.boundary, dtype=np.int64)
        if x.ndim != 2 or x.shape[1] != 2 or t.ndim != 2 or t.shape[1] != 3:
            raise InvalidMesh("nodes must be (N, 2) and triangles (T, 3)")
        if t.min() < 0 or t.max() >= len(x):
            raise InvalidMesh("triangle index out of range")
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "boundary", b)
        if np.any(self.signed_areas <= 0.0):
            raise InvalidMesh("triangles with non-positive signed area")
        self._check_boundary()

    def _check_boundary(self):
        t = self.triangles
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.minimum(directed[:, 0], directed[:, 1]) * len(self.nodes) + np.maximum(
            directed[:, 0], directed[:, 1])
        _, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            raise InvalidMesh("non-manifold edge shared by more than two triangles")
        bd = directed[counts[inv] == 1]
        b = self.boundary
        if len(bd) != len(b) or len(np.unique(b)) != len(b):
            raise InvalidMesh("boundary is not a single closed cycle")
        cyc = set(zip(b.tolist(), np.roll(b, -1).tolist()))
        if cyc != set(map(tuple, bd.tolist())):
            raise InvalidMesh("boundary cycle does not match the triangulation")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @cached_property
    def signed_areas(self):
        p = self.nodes[self.triangles]
        return 0.5 * _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    @cached_property
    def _edge_lengths_tri(self):
        p = self.nodes[self.triangles]
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.hypot(e[..., 0], e[..., 1])

    @cached_property
    def h_max(self):
        return float(self._edge_lengths_tri.max())

    @cached_property
    def quality(self):
        lens = self._edge_lengths_tri
        rho = 2.0 * self.signed_areas / lens.sum(axis=1)
        return float(np.max(lens.max(axis=1) / rho))

    @cached_property
    def interior(self):
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary] = False
        return np.flatnonzero(mask)

    def scaled(self, t):
        """Similar mesh t * Omega with identical connectivity."""
        return Mesh(self.nodes * t, self.triangles, self.boundary)

    def moved(self, displacement):
        return Mesh(self.nodes + displacement, self.triangles, self.boundary)

    def boundary_polygon(self):
        return convexity_project(self.nodes[self.boundary])


def mesh_measures(m):
    """Return ``(area, perimeter)`` of a mesh."""
    b = m.nodes[m.boundary]
    e = np.roll(b, -1, axis=0) - b
    return float(np.sum(m.signed_areas)), float(np.sum(np.hypot(e[:, 0], e[:, 1])))


@dataclass(frozen=True, eq=False)
class BoundaryGraph:
    """Boundary cycle of a mesh: edge k joins node k and node k+1 (cyclic)."""

    nodes: np.ndarray
    points: np.ndarray
    edge_lengths: np.ndarray
    normals: np.ndarray
    lumped: np.ndarray
    n_mesh_nodes: int

    @property
    def n(self):
        return len(self.nodes)

    @property
    def perimeter(self):
        return float(np.sum(self.edge_lengths))

    def edge_nodes(self):
        """Local (start, end) indices of every boundary edge."""
        k = np.arange(self.n)
        return k, np.roll(k, -1)


def boundary_trace(m):
    b = np.asarray(m.boundary)
    if len(b) < 3:
        raise InvalidMesh("boundary has fewer than 3 nodes")
    pts = m.nodes[b]
    e = np.roll(pts, -1, axis=0) - pts
    lengths = np.hypot(e[:, 0], e[:, 1])
    if np.any(lengths == 0.0):
        raise InvalidMesh("zero-length boundary edge")
    edge_nrm = np.stack([e[:, 1], -e[:, 0]], axis=1) / lengths[:, None]
    nrm = edge_nrm + np.roll(edge_nrm, 1, axis=0)
    nrm /= np.hypot(nrm[:, 0], nrm[:, 1])[:, None]
    lumped = 0.5 * (lengths + np.roll(lengths, 1))
    return BoundaryGraph(_readonly(b, np.int64), _readonly(pts), _readonly(lengths),
                         _readonly(nrm), _readonly(lumped), m.n_nodes)


# ---------------------------------------------------------------------------
# triangulation


def _boundary_points(p, spacing):
    v = p.vertices
    out = []
    for i in range(p.n):
        a, b = v[i], v[(i + 1) % p.n]
        k = max(1, math.ceil(p.edge_lengths[i] / spacing - 1e-9))
        s = np.arange(k)[:, None] / k
        out.append(a + s * (b - a))
    return np.concatenate(out)


def _lattice_points(p, spacing, margin):
    c = p.centroid
    lo = p.vertices.min(axis=0) - c
    hi = p.vertices.max(axis=0) - c
    dy = spacing * math.sqrt(3.0) / 2.0
    j = np.arange(math.floor(lo[1] / dy) - 1, math.ceil(hi[1] / dy) + 2)
    i = np.arange(math.floor(lo[0] / spacing) - 2, math.ceil(hi[0] / spacing) + 3)
    jj, ii = np.meshgrid(j, i, indexing="ij")
    x = (ii + 0.5 * (jj % 2)) * spacing
    y = jj * dy
    pts = np.stack([x.ravel(), y.ravel()], axis=1) + c
    return pts[p.inner_distance(pts) >= margin * spacing]


def _delaunay(points, nb):
    tri = Delaunay(points)
    if len(tri.coplanar):
        raise MeshQualityFailure("Delaunay dropped input points")
    t = tri.simplices.astype(np.int64)
    q = points[t]
    area = 0.5 * _cross2(q[:, 1] - q[:, 0], q[:, 2] - q[:, 0])
    scale = np.max(np.ptp(points, axis=0)) ** 2
    keep = np.abs(area) > 1e-12 * scale
    t, area = t[keep], area[keep]
    flip = area < 0
    t[flip] = t[flip][:, [0, 2, 1]]
    return t


def _smooth(points, t, nb, passes):
    n = len(points)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    from scipy.sparse import coo_matrix

    adj = coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                     shape=(n, n)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    x = points.copy()
    for _ in range(passes):
        avg = (adj @ x) / deg[:, None]
        x[nb:] = avg[nb:]
    return x


def _lattice_mesh(p, spacing, margin, passes):
    bpts = _boundary_points(p, spacing)
    ipts = _lattice_points(p, spacing, margin)
    pts = np.concatenate([bpts, ipts])
    nb = len(bpts)
    t = _delaunay(pts, nb)
    if passes and len(ipts):
        pts = _smooth(pts, t, nb, passes)
        t = _delaunay(pts, nb)
    return Mesh(pts, t, np.arange(nb))


def triangulate(p, h, c_usr=DEFAULT_C_USR, smoothing_passes=SMOOTHING_PASSES):
    """Triangulate a convex polygon with maximal element diameter ``h``.

    Boundary edges are split uniformly (polygon vertices stay nodes), the
    interior is filled with an equilateral lattice anchored at the centroid,
    the point set is Delaunay-triangulated and interior nodes are Laplace
    smoothed. The lattice spacing shrinks until ``h_max <= h`` and the
    shape-regularity bound ``h_T <= c_usr * rho_T`` both hold.
    """
    if not h > 0:
        raise InvalidArgument("mesh size must be positive")
    if h >= p.diameter:
        raise InvalidArgument("mesh size must be smaller than the polygon diameter")
    if p.aspect_ratio > MAX_ASPECT_RATIO:
        raise DegenerateGeometry(f"aspect ratio {p.aspect_ratio:.3g} exceeds {MAX_ASPECT_RATIO:g}")
    spacing = 0.8 * h
    best = None
    for _ in range(12):
        m = _lattice_mesh(p, spacing, 0.45, smoothing_passes)
        if m.h_max <= h and m.quality <= c_usr:
            return m
        best = m.quality if best is None else min(best, m.quality)
        spacing *= 0.9
    raise MeshQualityFailure(f"could not reach h_max <= {h} with quality <= {c_usr}", quality=best)


def disk_polygon(h, radius=1.0):
    """Regular polygon inscribed in a circle with chords of at most ``h / 2``.

    Short chords keep the triangulation from subdividing boundary edges, so
    every boundary node lies on the circle.
    """
    if not h > 0:
        raise InvalidArgument("mesh size must be positive")
    return make_regular_polygon(max(8, math.ceil(2.0 * math.pi * radius / (0.5 * h))), radius)


def disk_mesh(h, radius=1.0, n=None):
    """Triangulated regular polygon approximating the disk of given radius."""
    p = disk_polygon(h, radius) if n is None else make_regular_polygon(n, radius)
    return triangulate(p, h)


def refine(m, snap=None):
    """Uniform red refinement: every triangle is split into four.

    ``snap`` optionally maps the new boundary midpoints (array (k, 2)) to
    new positions, e.g. a projection onto a curved boundary.
    """
    t = m.triangles
    n = m.n_nodes
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    es = np.sort(e, axis=1)
    key = es[:, 0] * n + es[:, 1]
    ukey, inv = np.unique(key, return_inverse=True)
    ua, ub = ukey // n, ukey % n
    mid = 0.5 * (m.nodes[ua] + m.nodes[ub])
    mid_id = n + np.arange(len(ukey))
    nt = len(t)
    m01, m12, m20 = (mid_id[inv[:nt]], mid_id[inv[nt:2 * nt]], mid_id[inv[2 * nt:]])
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    new_t = np.concatenate([
        np.stack([a, m01, m20], 1), np.stack([m01, b, m12], 1),
        np.stack([m20, m12, c], 1), np.stack([m01, m12, m20], 1)])
    nodes = np.concatenate([m.nodes, mid])
    bd = m.boundary
    bkey = np.minimum(bd, np.roll(bd, -1)) * n + np.maximum(bd, np.roll(bd, -1))
    bmid = mid_id[np.searchsorted(ukey, bkey)]
    if snap is not None:
        nodes[bmid] = snap(nodes[bmid])
    new_b = np.stack([bd, bmid], axis=1).ravel()
    return Mesh(nodes, new_t, new_b)


def circle_snap(radius=1.0, center=(0.0, 0.0)):
    c = np.asarray(center, float)

    def snap(x):
        d = x - c
        return c + radius * d / np.hypot(d[:, 0], d[:, 1])[:, None]

    return snap
