"""P1 finite elements: assembly, SPD solves and the smallest generalized eigenpair."""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import InvalidArgument, InvalidWeight, NoConvergence
from .geometry import boundary_trace

# 3-point Gauss-Legendre rule on [0, 1]
GAUSS_X = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
GAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0


def _symmetric(rows, cols, vals, n):
    a = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    a.sum_duplicates()
    # average with the transpose so that A == A.T holds bitwise
    a = ((a + a.T) * 0.5).tocsr()
    a.sort_indices()
    return a


def _gradients(m):
    """Barycentric gradients (T, 3, 2) and element areas (T,)."""
    p = m.nodes[m.triangles]
    area = m.signed_areas
    # gradient of lambda_i is the rotated opposite edge divided by 2|T|
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    e = np.stack([e0, e1, e2], axis=1)
    g = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2.0 * area)[:, None, None]
    return g, area


def assemble_stiffness(m):
    g, area = _gradients(m)
    k = np.einsum("tid,tjd->tij", g, g) * area[:, None, None]
    t = m.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return _symmetric(rows, cols, k.ravel(), m.n_nodes)


_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0


def assemble_mass(m):
    t = m.triangles
    vals = (m.signed_areas[:, None, None] * _MASS_REF).ravel()
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return _symmetric(rows, cols, vals, m.n_nodes)


def gauss_points(t0, t1):
    """Gauss abscissae on the parameter intervals [t0, t1] of boundary edges, shape (k, 3)."""
    t0 = np.asarray(t0, float)
    t1 = np.asarray(t1, float)
    return t0[:, None] + (t1 - t0)[:, None] * GAUSS_X


def assemble_boundary_segments(bg, edge, t0, t1, wq):
    """Boundary matrix of int w phi_i phi_j ds over edge sub-segments.

    Segment ``k`` covers the parameter range ``[t0[k], t1[k]]`` of boundary
    edge ``edge[k]``; ``wq`` holds the weight at the three Gauss points of
    every segment. Segments of one edge must not overlap.
    """
    edge = np.asarray(edge, dtype=np.int64)
    wq = np.asarray(wq, float)
    s = gauss_points(t0, t1)
    ds = (bg.edge_lengths[edge] * (np.asarray(t1) - np.asarray(t0)))[:, None] * GAUSS_W
    f0, f1 = 1.0 - s, s
    wds = wq * ds
    e00 = np.sum(wds * f0 * f0, axis=1)
    e01 = np.sum(wds * f0 * f1, axis=1)
    e11 = np.sum(wds * f1 * f1, axis=1)
    a = bg.nodes[edge]
    b = bg.nodes[(edge + 1) % bg.n]
    rows = np.concatenate([a, a, b, b])
    cols = np.concatenate([a, b, a, b])
    vals = np.concatenate([e00, e01, e01, e11])
    return _symmetric(rows, cols, vals, bg.n_mesh_nodes)


def assemble_weighted_boundary_mass(bg, w):
    """Boundary mass with a piecewise-linear weight given at the boundary nodes."""
    w = np.asarray(w, float)
    if w.shape != (bg.n,):
        raise InvalidArgument("one weight per boundary node expected")
    if not np.all(np.isfinite(w)) or np.any(w <= 0.0):
        raise InvalidWeight("boundary weights must be positive and finite")
    edge = np.arange(bg.n)
    s = gauss_points(np.zeros(bg.n), np.ones(bg.n))
    wq = w[:, None] * (1.0 - s) + np.roll(w, -1)[:, None] * s
    return assemble_boundary_segments(bg, edge, np.zeros(bg.n), np.ones(bg.n), wq)


@dataclass(frozen=True, eq=False)
class FESystem:
    """Assembled matrices of a mesh that never change during a flow."""

    mesh: object
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    boundary: object
    boundary_mass: sp.csr_matrix

    @property
    def star(self):
        """Gram matrix of the H1 inner product."""
        return self.stiffness + self.mass


_SYSTEMS = weakref.WeakKeyDictionary()


def fe_system(m):
    """Cached matrices for a mesh (meshes are immutable, so caching is safe)."""
    s = _SYSTEMS.get(m)
    if s is None:
        bg = boundary_trace(m)
        s = FESystem(m, assemble_stiffness(m), assemble_mass(m), bg,
                     assemble_weighted_boundary_mass(bg, np.ones(bg.n)))
        _SYSTEMS[m] = s
    return s


# ---------------------------------------------------------------------------
# solvers


def solve_spd(a, b, tol=1e-10, x0=None, maxiter=None):
    """Jacobi-preconditioned conjugate gradients.

    Returns ``x`` with ``||A x - b|| <= tol * ||b||``; raises
    :class:`NoConvergence` after ``maxiter`` (default ``10 * n``) steps.
    """
    if not 0.0 < tol < 1.0:
        raise InvalidArgument("tol must lie in (0, 1)")
    b = np.asarray(b, float)
    n = len(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    if maxiter is None:
        maxiter = 10 * n
    dinv = 1.0 / a.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, float)
    r = b - a @ x
    target = tol * bnorm
    rnorm = np.linalg.norm(r)
    if rnorm <= target:
        return x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        ap = a @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rnorm = np.linalg.norm(r)
        if rnorm <= target:
            # guard against drift of the recursive residual
            r_true = b - a @ x
            if np.linalg.norm(r_true) <= target:
                return x
            r = r_true
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NoConvergence(f"CG did not converge in {maxiter} iterations",
                        residual=float(np.linalg.norm(b - a @ x) / bnorm), iterations=maxiter)


class Factorized:
    """Sparse LU factorization of an SPD matrix exposing ``solve``."""

    def __init__(self, a):
        # SPD: diagonal pivots are safe, and without them superlu's partial
        # pivoting can wreck the fill-reducing order on refined meshes
        self._lu = splu(sp.csc_matrix(a), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                        options={"SymmetricMode": True})

    def solve(self, b):
        return self._lu.solve(np.asarray(b, float))


@dataclass
class EigenPair:
    value: float
    vector: np.ndarray
    iterations: int
    residual: float


def smallest_generalized_eig(a, m, deflate=None, tol=1e-10, maxiter=500, x0=None, seed=0,
                             block=4):
    """Smallest eigenpair of ``A u = lambda M u`` by shifted inverse iteration.

    A block of vectors is iterated with Rayleigh-Ritz projection so that
    clustered eigenvalues (e.g. the rotated pairs on a disk) do not stall
    convergence. ``deflate`` is an optional vector (or array of column
    vectors); iterates are kept M-orthogonal to its span. The returned
    vector satisfies ``u^T M u = 1`` and ``||A u - lambda M u|| <= tol * ||M u||``.
    """
    n = a.shape[0]
    sigma = 1e-8 * a.diagonal().sum() / m.diagonal().sum()
    op = Factorized(a + sigma * m)
    q = None
    if deflate is not None:
        z = np.asarray(deflate, float).reshape(n, -1)
        g = z.T @ (m @ z)
        r = np.linalg.cholesky(g)
        q = np.linalg.solve(r, z.T).T
        mq = m @ q

    def project(v):
        if q is None:
            return v
        return v - q @ (mq.T @ v)

    rng = np.random.default_rng(seed)
    block = max(1, min(block, n - (0 if q is None else q.shape[1])))
    x = rng.standard_normal((n, block))
    if x0 is not None:
        x[:, 0] = x0
    x = project(x)
    lam, res = np.inf, np.inf
    for it in range(1, maxiter + 1):
        y = project(np.column_stack([op.solve(m @ x[:, j]) for j in range(block)]))
        # Rayleigh-Ritz on span(y)
        ay = a @ y
        my = m @ y
        ga = y.T @ ay
        gm = y.T @ my
        ga = 0.5 * (ga + ga.T)
        gm = 0.5 * (gm + gm.T)
        w, c = _eigh_pair(ga, gm)
        x = y @ c
        u = x[:, 0]
        mu = my @ c[:, 0]
        lam = float(w[0])
        res = float(np.linalg.norm(ay @ c[:, 0] - lam * mu) / np.linalg.norm(mu))
        if res <= tol:
            if x0 is not None and u @ (m @ x0) < 0:
                u = -u
            elif x0 is None and u[np.argmax(np.abs(u))] < 0:
                u = -u
            return EigenPair(lam, u, it, res)
    raise NoConvergence("inverse iteration did not converge", residual=res, iterations=maxiter)


def _eigh_pair(ga, gm):
    from scipy.linalg import eigh

    return eigh(ga, gm)


def write_matrix_market(path, a):
    import scipy.io

    scipy.io.mmwrite(str(path), sp.coo_matrix(a))
