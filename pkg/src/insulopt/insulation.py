"""Optimal film density for a given boundary trace.

For a piecewise-linear trace ``u`` and parameters ``(m_hat, ell_min)`` the
free film minimizing ``int u^2 / (ell_min + ell) ds`` subject to
``ell >= 0`` and ``int ell ds = m`` is

    h_u = (ell_min / c) * max(|u| - c, 0),

where ``c`` balances the free mass. All integrals here are taken of the
exact piecewise functions: every boundary edge is split where ``u``
changes sign and where ``|u|`` crosses ``c``, which leaves pieces on which
``|u|`` is affine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleParams, InvalidArgument, InvalidDensity
from .fem import GAUSS_W, assemble_boundary_segments, gauss_points

# relative size of the free mass treated as rounding noise of m_hat - ell_min * P
_MASS_SNAP = 1e-12


@dataclass(frozen=True)
class InsulationParams:
    """Total mass, lower film bound and the perimeter they refer to."""

    m_hat: float
    ell_min: float
    perimeter: float
    # (reference params, accumulated scale) of a rescaled parameter set
    origin: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in ("m_hat", "ell_min", "perimeter"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidArgument(f"{name} must be finite")
        if not self.m_hat > 0:
            raise InfeasibleParams("m_hat must be positive")
        if self.ell_min < 0:
            raise InfeasibleParams("ell_min must be non-negative")
        if not self.perimeter > 0:
            raise InvalidArgument("perimeter must be positive")
        if self._raw_m() < -_MASS_SNAP * self.m_hat:
            raise InfeasibleParams(
                f"free mass {self._raw_m():.6g} < 0: perimeter {self.perimeter:.6g} "
                f"exceeds m_hat / ell_min = {self.m_hat / self.ell_min:.6g}")

    @classmethod
    def from_q(cls, m_hat, q, perimeter):
        """Parameters with ``ell_min = q * m_hat / perimeter``."""
        if not 0.0 <= q <= 1.0:
            raise InfeasibleParams("q must lie in [0, 1]")
        return cls(m_hat, q * m_hat / perimeter, perimeter)

    def _raw_m(self):
        return self.m_hat - self.ell_min * self.perimeter

    @property
    def m(self):
        """Free mass; rounding residue at q = 1 is snapped to zero."""
        if self.origin is not None:
            base, t = self.origin
            return (t * t) * base.m
        m = self._raw_m()
        return 0.0 if m < _MASS_SNAP * self.m_hat else m

    @property
    def q(self):
        return self.ell_min * self.perimeter / self.m_hat

    @property
    def beta(self):
        if self.ell_min <= 0:
            raise InvalidArgument("beta = 1/ell_min is undefined for ell_min = 0")
        return 1.0 / self.ell_min

    def with_perimeter(self, perimeter):
        return InsulationParams(self.m_hat, self.ell_min, perimeter)


def _require_lower_bound(p):
    if p.ell_min <= 0:
        raise InvalidArgument("the optimal density needs ell_min > 0")
    if p.m < 0:
        raise InfeasibleParams("negative free mass")


# ---------------------------------------------------------------------------
# piecewise description of |u| along the boundary


def _abs_pieces(bg, u_b):
    """Split boundary edges at sign changes of ``u``.

    Returns arrays ``edge, t0, t1, a0, a1`` such that ``|u|`` is affine
    from ``a0`` to ``a1`` on the parameter range ``[t0, t1]`` of ``edge``.
    """
    u0 = u_b
    u1 = np.roll(u_b, -1)
    edge = np.arange(len(u_b))
    cross = (u0 * u1) < 0
    tz = np.where(cross, u0 / np.where(cross, u0 - u1, 1.0), 1.0)
    e = np.concatenate([edge, edge[cross]])
    t0 = np.concatenate([np.zeros(len(u_b)), tz[cross]])
    t1 = np.concatenate([tz, np.ones(cross.sum())])
    a0 = np.concatenate([np.abs(u0), np.zeros(cross.sum())])
    a1 = np.concatenate([np.where(cross, 0.0, np.abs(u1)), np.abs(u1[cross])])
    order = np.lexsort((t0, e))
    return e[order], t0[order], t1[order], a0[order], a1[order]


def _split_at_level(e, t0, t1, a0, a1, c):
    """Further split affine pieces where they cross the level ``c``."""
    lo, hi = np.minimum(a0, a1), np.maximum(a0, a1)
    cross = (lo < c) & (hi > c)
    s = np.where(cross, (c - a0) / np.where(cross, a1 - a0, 1.0), 1.0)
    tm = t0 + s * (t1 - t0)
    keep = ~cross
    e2 = np.concatenate([e[keep], e[cross], e[cross]])
    t02 = np.concatenate([t0[keep], t0[cross], tm[cross]])
    t12 = np.concatenate([t1[keep], tm[cross], t1[cross]])
    a02 = np.concatenate([a0[keep], a0[cross], np.full(cross.sum(), c)])
    a12 = np.concatenate([a1[keep], np.full(cross.sum(), c), a1[cross]])
    order = np.lexsort((t02, e2))
    return e2[order], t02[order], t12[order], a02[order], a12[order]


def _excess(c, length, lo, hi):
    """int (|u| - c)_+ ds summed over affine pieces of |u|."""
    full = lo >= c
    part = (hi > c) & ~full
    out = np.sum(length[full] * (0.5 * (lo[full] + hi[full]) - c))
    d = hi[part] - lo[part]
    out += np.sum(0.5 * length[part] * (hi[part] - c) ** 2 / d)
    return out


def _level_measure(c, length, lo, hi):
    """Boundary measure of {|u| >= c}."""
    full = lo >= c
    part = (hi > c) & ~full
    return np.sum(length[full]) + np.sum(length[part] * (hi[part] - c) / (hi[part] - lo[part]))


def _trace_pieces(bg, u_b):
    e, t0, t1, a0, a1 = _abs_pieces(bg, np.asarray(u_b, float))
    length = bg.edge_lengths[e] * (t1 - t0)
    return length, np.minimum(a0, a1), np.maximum(a0, a1)


def c_residual(bg, u_b, p, c):
    """phi(c) = c (|{|u| >= c}| + m beta) - int_{|u| >= c} |u| ds."""
    length, lo, hi = _trace_pieces(bg, u_b)
    return -(_excess(c, length, lo, hi) - p.m * p.beta * c)


def compute_c(bg, u_b, p):
    """Threshold constant of the optimal density.

    ``F(c) = int (|u| - c)_+ ds - m beta c`` is convex, decreasing and
    piecewise quadratic in ``c`` with breakpoints at the nodal values of
    ``|u|``. The bracket containing the root is located by bisection over
    the sorted breakpoints and the quadratic is then solved in closed form.
    """
    _require_lower_bound(p)
    u_b = np.asarray(u_b, float)
    if not np.all(np.isfinite(u_b)):
        raise InvalidArgument("trace must be finite")
    umax = float(np.max(np.abs(u_b))) if len(u_b) else 0.0
    if umax == 0.0:
        return 0.0
    mb = p.m * p.beta
    if mb == 0.0:
        return umax
    length, lo, hi = _trace_pieces(bg, u_b)

    def f(c):
        return _excess(c, length, lo, hi) - mb * c

    knots = np.unique(np.concatenate([[0.0], np.abs(u_b)]))
    # F(0) > 0 and F(umax) < 0: find consecutive knots with a sign change
    i, j = 0, len(knots) - 1
    while j - i > 1:
        k = (i + j) // 2
        if f(knots[k]) > 0:
            i = k
        else:
            j = k
    a, b = knots[i], knots[j]
    # exact quadratic of the bracket: pieces fully above b are linear in c,
    # pieces spanning [a, b] contribute (hi - c)^2 / (2 slope)
    above = lo >= b
    span = (lo <= a) & (hi >= b) & (hi > lo)
    w = 0.5 * length[span] / (hi[span] - lo[span])
    q2 = np.sum(w)
    q1 = -2.0 * np.sum(w * hi[span]) - np.sum(length[above]) - mb
    q0 = np.sum(w * hi[span] ** 2) + np.sum(length[above] * 0.5 * (lo[above] + hi[above]))
    c = _quadratic_root(q2, q1, q0, a, b)
    # Newton polish against the direct evaluation
    for _ in range(3):
        fc = f(c)
        slope = -_level_measure(c, length, lo, hi) - mb
        step = fc / slope
        cn = min(max(c - step, a), b)
        if cn == c:
            break
        c = cn
    return float(c)


def _quadratic_root(q2, q1, q0, a, b):
    if q2 == 0.0:
        return min(max(-q0 / q1, a), b)
    disc = max(q1 * q1 - 4.0 * q2 * q0, 0.0)
    sq = math.sqrt(disc)
    # numerically stable pair of roots
    t = -0.5 * (q1 + math.copysign(sq, q1))
    roots = [t / q2, q0 / t if t != 0 else (a + b) / 2]
    mid = 0.5 * (a + b)
    r = min(roots, key=lambda x: abs(x - mid) if a - 1e-12 * b <= x <= b * (1 + 1e-12) else np.inf)
    return min(max(r, a), b)


# ---------------------------------------------------------------------------
# densities


@dataclass(frozen=True, eq=False)
class Density:
    """Free film thickness on the boundary.

    Two representations are supported. The optimal density of a trace
    (``trace`` and ``c`` set) is the exact function
    ``(ell_min / c) max(|u| - c, 0)`` of the piecewise-linear trace. A plain
    density (``trace`` is None) is piecewise linear between its nodal values.
    ``values`` always holds the nodal values.
    """

    values: np.ndarray
    params: InsulationParams
    c: float | None = None
    trace: np.ndarray | None = None

    @property
    def is_optimal_form(self):
        return self.trace is not None and self.c is not None and self.c > 0

    @property
    def total(self):
        """Nodal total film ell_min + ell."""
        return self.values + self.params.ell_min

    def segments(self, bg):
        """Sub-segments on which the density is affine: ``(edge, t0, t1)``."""
        if not self.is_optimal_form:
            n = bg.n
            return np.arange(n), np.zeros(n), np.ones(n)
        e, t0, t1, a0, a1 = _abs_pieces(bg, self.trace)
        e, t0, t1, _, _ = _split_at_level(e, t0, t1, a0, a1, self.c)
        return e, t0, t1

    def evaluate(self, bg, edge, t):
        """Free film at parameter ``t`` of boundary edges ``edge`` (broadcast)."""
        edge = np.asarray(edge)
        t = np.asarray(t, float)
        if self.is_optimal_form:
            u0, u1 = self.trace[edge], np.roll(self.trace, -1)[edge]
            if t.ndim > edge.ndim:
                u0, u1 = u0[..., None], u1[..., None]
            u = (1.0 - t) * u0 + t * u1
            return (self.params.ell_min / self.c) * np.maximum(np.abs(u) - self.c, 0.0)
        v0, v1 = self.values[edge], np.roll(self.values, -1)[edge]
        if t.ndim > edge.ndim:
            v0, v1 = v0[..., None], v1[..., None]
        return (1.0 - t) * v0 + t * v1

    def quadrature(self, bg):
        """Gauss rule adapted to the density: ``(edge, s, ds, ell)`` arrays of shape (k, 3)."""
        e, t0, t1 = self.segments(bg)
        s = gauss_points(t0, t1)
        ds = (bg.edge_lengths[e] * (t1 - t0))[:, None] * GAUSS_W
        return e, t0, t1, s, ds, self.evaluate(bg, e, s)

    def mass(self, bg):
        _, _, _, _, ds, ell = self.quadrature(bg)
        return float(np.sum(ell * ds))

    def coefficient_of_variation(self, bg):
        """Standard deviation over mean of ell with respect to arc length."""
        _, _, _, _, ds, ell = self.quadrature(bg)
        perimeter = bg.perimeter
        mean = np.sum(ell * ds) / perimeter
        if mean <= 0.0:
            return 0.0
        var = np.sum((ell - mean) ** 2 * ds) / perimeter
        return float(math.sqrt(max(var, 0.0)) / mean)

    def boundary_matrix(self, bg):
        """Weighted boundary mass with weight 1 / (ell_min + ell) at Gauss points."""
        e, t0, t1, _, _, ell = self.quadrature(bg)
        tot = self.params.ell_min + ell
        if np.any(tot <= 0.0):
            raise InvalidDensity("total film thickness must be positive")
        return assemble_boundary_segments(bg, e, t0, t1, 1.0 / tot)


def density_from_values(values, p, bg=None, normalize=False):
    """Plain piecewise-linear density; optionally rescaled to carry mass ``m``."""
    v = np.array(values, dtype=float)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise InvalidDensity("density must be finite and non-negative")
    if normalize:
        mass = float(np.sum(v * bg.lumped))
        if mass > 0:
            v *= p.m / mass
    v.setflags(write=False)
    return Density(v, p)


def optimal_density(bg, u_b, p, c=None):
    """Optimal free film for the trace ``u_b``.

    ``c`` may be supplied to evaluate the fixed-threshold map
    ``(ell_min / c) max(|u| - c, 0)``; it defaults to :func:`compute_c`.
    A vanishing trace gives the uniform density ``m / perimeter``.
    """
    _require_lower_bound(p)
    u_b = np.array(u_b, dtype=float)
    if c is None:
        c = compute_c(bg, u_b, p)
    if c == 0.0:
        return density_from_values(np.full(bg.n, p.m / bg.perimeter), p)
    vals = (p.ell_min / c) * np.maximum(np.abs(u_b) - c, 0.0)
    vals.setflags(write=False)
    u_b.setflags(write=False)
    return Density(vals, p, float(c), u_b)


def _trace_at(u_b, edge, s):
    u0, u1 = u_b[edge], np.roll(u_b, -1)[edge]
    return (1.0 - s) * u0[:, None] + s * u1[:, None]


def boundary_energy(bg, u_b, d):
    """int u^2 / (ell_min + ell) ds with the density-adapted Gauss rule."""
    u_b = np.asarray(u_b, float)
    e, _, _, s, ds, ell = d.quadrature(bg)
    tot = d.params.ell_min + ell
    if np.any(tot <= 0.0):
        raise InvalidDensity("total film thickness must be positive")
    u = _trace_at(u_b, e, s)
    return float(np.sum(u * u / tot * ds))


def g_c(x, c, beta):
    """beta x^2 below the threshold c and beta c |x| above it."""
    ax = np.abs(x)
    return np.where(ax < c, beta * x * x, beta * c * ax)


def boundary_energy_gc(bg, u_b, p, c):
    """int G_c(u) ds evaluated exactly on the piecewise-linear trace."""
    u_b = np.asarray(u_b, float)
    e, t0, t1, a0, a1 = _abs_pieces(bg, u_b)
    e, t0, t1, a0, a1 = _split_at_level(e, t0, t1, a0, a1, c)
    length = bg.edge_lengths[e] * (t1 - t0)
    s = gauss_points(np.zeros(len(e)), np.ones(len(e)))
    a = (1.0 - s) * a0[:, None] + s * a1[:, None]
    ds = length[:, None] * GAUSS_W
    return float(np.sum(g_c(a, c, p.beta) * ds))


def objective_j(system, u, d):
    """J(u, ell) = int |grad u|^2 + int u^2 / (ell_min + ell) ds."""
    u = np.asarray(u, float)
    bg = system.boundary
    return float(u @ (system.stiffness @ u)) + boundary_energy(bg, u[bg.nodes], d)


def rayleigh_quotient(system, u, d):
    u = np.asarray(u, float)
    return objective_j(system, u, d) / float(u @ (system.mass @ u))
