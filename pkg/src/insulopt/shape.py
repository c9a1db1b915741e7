"""Descent of the volume-normalized insulation eigenvalue over convex polygons.

One descent iteration

1. probes every boundary node by central differences of the normalized
   eigenvalue along the node normal,
2. smooths the resulting boundary loads by a damped linear elasticity solve
   and keeps the normal part of the boundary displacement,
3. moves the boundary, restores convexity by hull projection, re-triangulates
   and accepts the move under an Armijo condition (halving the step otherwise).
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import GradientProbeFailure, InfeasibleParams, InsuloptError, InvalidArgument
from .fem import Factorized, assemble_mass, fe_system
from .flow import FlowParams, trace_l1
from .geometry import (
    DEFAULT_C_USR,
    ConvexPolygon,
    Mesh,
    boundary_trace,
    convexity_project,
    mesh_measures,
    triangulate,
)
from .insulation import InsulationParams, boundary_energy, optimal_density
from .scaling import V_UNIT_DISK, ScaleMap, scaled_eigenvalue


@dataclass(frozen=True)
class ElasticityParams:
    E: float = 0.5
    nu: float = 0.2
    rho: float = 0.5

    def __post_init__(self):
        if not self.E > 0:
            raise InvalidArgument("E must be positive")
        if not 0.0 < self.nu < 0.5:
            raise InvalidArgument("Poisson ratio must lie in (0, 0.5)")
        if not self.rho > 0:
            raise InvalidArgument("rho must be positive")

    @property
    def lame(self):
        """Plane-stress Lame constants (lambda, mu)."""
        mu = self.E / (2.0 * (1.0 + self.nu))
        lam = self.E * self.nu / (1.0 - self.nu ** 2)
        return lam, mu


@dataclass(frozen=True)
class ShapeParams:
    """Controls of the shape descent.

    ``m_hat`` and ``ell_min`` refer to the reference volume ``v_target``;
    ``h``, the step sizes and ``box`` are lengths on the normalized domain.
    """

    m_hat: float
    ell_min: float
    h: float = 2.0 ** -3
    v_target: float = V_UNIT_DISK
    step_size: float = 0.05
    max_step: float = 0.2
    step_growth: float = 1.5
    armijo: float = 1e-4
    max_halvings: int = 8
    min_step: float = 1e-4
    probe_scale: float = 1e-2
    probe_iters: int = 0
    stationarity: float = 1e-3
    c_usr: float = DEFAULT_C_USR
    box: float = 10.0
    workers: int = 1
    crosscheck_every: int = 10

    def __post_init__(self):
        if not self.m_hat > 0:
            raise InfeasibleParams("m_hat must be positive")
        if self.ell_min < 0:
            raise InfeasibleParams("ell_min must be non-negative")
        for name in ("h", "v_target", "step_size", "max_step", "probe_scale", "min_step", "box"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.step_growth < 1.0 or self.workers < 1:
            raise InvalidArgument("step_growth must be >= 1 and workers >= 1")

    @classmethod
    def from_q(cls, m_hat, q, **kw):
        """Lower bound as a fraction ``q`` of the mass of a uniform film on the reference disk."""
        if not 0.0 <= q <= 1.0:
            raise InfeasibleParams("q must lie in [0, 1]")
        v = kw.get("v_target", V_UNIT_DISK)
        disk_perimeter = 2.0 * math.sqrt(math.pi * v)
        return cls(m_hat, q * m_hat / disk_perimeter, **kw)

    @property
    def perimeter_bound(self):
        return math.inf if self.ell_min == 0 else self.m_hat / self.ell_min

    @property
    def delta(self):
        return self.probe_scale * self.h


@dataclass(frozen=True, eq=False)
class ShapeState:
    polygon: ConvexPolygon
    mesh: Mesh
    eigen: object
    lambda_hat: float
    step_size: float
    stalled: bool = False
    reason: str = ""

    @property
    def u(self):
        return self.eigen.u


# ---------------------------------------------------------------------------
# evaluation


def normalize_mesh(mesh, v_target):
    area, _ = mesh_measures(mesh)
    t = ScaleMap.for_area(area, v_target).t
    return mesh.scaled(t) if t != 1.0 else mesh


def frozen_rayleigh(mesh, u, sp_):
    """Normalized Rayleigh quotient at fixed nodal ``u`` with re-optimized film."""
    mt = normalize_mesh(mesh, sp_.v_target)
    system = fe_system(mt)
    bg = system.boundary
    ub = u[bg.nodes]
    num = float(u @ (system.stiffness @ u))
    if sp_.ell_min == 0:
        l1 = trace_l1(bg, ub)
        num += l1 * l1 / sp_.m_hat
    else:
        p = InsulationParams(sp_.m_hat, sp_.ell_min, bg.perimeter)
        num += boundary_energy(bg, ub, optimal_density(bg, ub, p))
    return num / float(u @ (system.mass @ u))


def evaluate(mesh, sp_, fp, init=None):
    """Flow solve on the volume-normalized mesh; returns (lambda_hat, eigen result)."""
    p = InsulationParams(sp_.m_hat, sp_.ell_min, 1.0)
    res = scaled_eigenvalue(mesh, p, fp, sp_.v_target, init=init)
    return res.lambda_hat, res.eigen


def is_feasible(mesh, sp_):
    area, per = mesh_measures(mesh)
    t = math.sqrt(sp_.v_target / area)
    if t * per > sp_.perimeter_bound * (1.0 + 1e-12):
        return False
    x = mesh.nodes[mesh.boundary]
    return bool(np.all(np.abs(x - x.mean(axis=0)) <= 0.5 * sp_.box))


def initial_state(polygon, sp_, fp=None, seed=0):
    fp = fp or FlowParams()
    mesh = normalize_mesh(triangulate(polygon, sp_.h * _scale_for(polygon, sp_), sp_.c_usr),
                          sp_.v_target)
    if not is_feasible(mesh, sp_):
        raise InfeasibleParams("initial shape violates the perimeter bound")
    lam, eig = evaluate(mesh, sp_, fp)
    return ShapeState(mesh.boundary_polygon(), mesh, eig, lam, sp_.step_size)


def _scale_for(polygon, sp_):
    """Mesh size on the input polygon that becomes ``h`` after normalization."""
    return math.sqrt(polygon.area / sp_.v_target)


# ---------------------------------------------------------------------------
# gradient


def harmonic_extension(mesh):
    """Interior weights of the discrete harmonic extension of each boundary hat function.

    Returns an array (n_nodes, nb); column ``i`` equals 1 at boundary node
    ``i``, 0 at the other boundary nodes and is discrete harmonic inside.
    """
    k = fe_system(mesh).stiffness.tocsr()
    b = mesh.boundary
    inner = mesh.interior
    ext = np.zeros((mesh.n_nodes, len(b)))
    ext[b, np.arange(len(b))] = 1.0
    if len(inner):
        kii = k[inner][:, inner]
        kib = k[inner][:, b].toarray()
        op = Factorized(kii)
        ext[inner] = -np.column_stack([op.solve(kib[:, j]) for j in range(len(b))])
    return ext


def _probe_value(mesh, u, sp_, fp, nodes):
    moved = Mesh(nodes, mesh.triangles, mesh.boundary)
    if sp_.probe_iters > 0:
        return evaluate(moved, sp_, replace(fp, max_iter=sp_.probe_iters), init=u)[0]
    return frozen_rayleigh(moved, u, sp_)


def _probe(args):
    mesh, u, sp_, fp, i, normal, weights = args
    # transport the whole mesh smoothly so the probe measures a shape change,
    # not a distortion of the elements next to the moved node
    shift = sp_.delta * weights[:, None] * normal[None, :]
    try:
        up = _probe_value(mesh, u, sp_, fp, mesh.nodes + shift)
        down = _probe_value(mesh, u, sp_, fp, mesh.nodes - shift)
    except (InsuloptError, FloatingPointError) as exc:
        raise GradientProbeFailure(f"probe at boundary vertex {i} failed: {exc}", vertex=i) from exc
    g = (up - down) / (2.0 * sp_.delta)
    if not math.isfinite(g):
        raise GradientProbeFailure(f"probe at boundary vertex {i} is not finite", vertex=i)
    return g


def shape_gradient(s, sp_, fp=None):
    """Central differences of the normalized eigenvalue per boundary vertex.

    Probe ``i`` pushes boundary vertex ``i`` by ``+-delta`` along its
    normal and carries the interior along with the harmonic extension of
    that move. The current eigenfunction is reused on each perturbed mesh
    (same connectivity); since it minimizes the functional, the change of
    the frozen quotient equals the change of the eigenvalue to first order.
    With ``probe_iters > 0`` a short warm-started flow is run instead.
    """
    fp = fp or FlowParams()
    bg = boundary_trace(s.mesh)
    ext = harmonic_extension(s.mesh)
    jobs = [(s.mesh, s.u, sp_, fp, i, bg.normals[i], ext[:, i]) for i in range(bg.n)]
    if sp_.workers > 1:
        with ProcessPoolExecutor(sp_.workers) as pool:
            g = list(pool.map(_probe, jobs, chunksize=max(1, len(jobs) // (4 * sp_.workers))))
    else:
        g = [_probe(j) for j in jobs]
    return np.array(g)


# ---------------------------------------------------------------------------
# elasticity smoothing


def assemble_elasticity(mesh, ep):
    """Plane-stress stiffness plus rho times the vector mass; dofs (x0, y0, x1, y1, ...)."""
    lam, mu = ep.lame
    p = mesh.nodes[mesh.triangles]
    area = mesh.signed_areas
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    gx = -e[..., 1] / (2.0 * area)[:, None]
    gy = e[..., 0] / (2.0 * area)[:, None]
    nt = len(area)
    # strain-displacement rows (exx, eyy, 2exy) for dofs ordered (u0, v0, u1, v1, u2, v2)
    b = np.zeros((nt, 3, 6))
    b[:, 0, 0::2] = gx
    b[:, 1, 1::2] = gy
    b[:, 2, 0::2] = gy
    b[:, 2, 1::2] = gx
    d = np.array([[lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, mu]])
    ke = np.einsum("tki,kl,tlj->tij", b, d, b) * area[:, None, None]
    dofs = np.empty((nt, 6), dtype=np.int64)
    dofs[:, 0::2] = 2 * mesh.triangles
    dofs[:, 1::2] = 2 * mesh.triangles + 1
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    k = sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(2 * mesh.n_nodes,) * 2)
    m = assemble_mass(mesh)
    mv = sp.kron(m, sp.identity(2), format="csr")
    a = k + ep.rho * mv
    return ((a + a.T) * 0.5).tocsr()


def elasticity_smooth(mesh, loads, ep=None):
    """Displacement of all nodes driven by point loads at the boundary nodes.

    ``loads`` has shape (nb, 2) in boundary order (typically ``-g_i n_i``).
    """
    ep = ep or ElasticityParams()
    loads = np.asarray(loads, float)
    if not np.all(np.isfinite(loads)):
        raise InvalidArgument("loads must be finite")
    f = np.zeros(2 * mesh.n_nodes)
    b = mesh.boundary
    f[2 * b] = loads[:, 0]
    f[2 * b + 1] = loads[:, 1]
    if not np.any(f):
        return np.zeros((mesh.n_nodes, 2))
    w = Factorized(assemble_elasticity(mesh, ep)).solve(f)
    return w.reshape(-1, 2)


# ---------------------------------------------------------------------------
# descent


def _candidate_mesh(mesh, disp, sp_):
    """Move the boundary nodes, take the convex hull and re-triangulate it."""
    hull = convexity_project(mesh.nodes[mesh.boundary] + disp)
    hh = sp_.h * math.sqrt(hull.area / sp_.v_target)
    return normalize_mesh(triangulate(hull, hh, sp_.c_usr), sp_.v_target)


def _transfer(u, old, new):
    """Carry a nodal field to another mesh of the same shape (linear interpolation)."""
    if new.n_nodes == old.n_nodes and np.array_equal(new.triangles, old.triangles):
        return u
    from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

    # compare shapes at equal area
    scale = math.sqrt(mesh_measures(new)[0] / mesh_measures(old)[0])
    x_old = old.nodes * scale
    v = LinearNDInterpolator(x_old, u)(new.nodes)
    bad = ~np.isfinite(v)
    if bad.any():
        v[bad] = NearestNDInterpolator(x_old, u)(new.nodes[bad])
    return v


def descend_step(s, sp_, fp=None, ep=None, g=None):
    """One Armijo-controlled descent step; returns the new state and the gradient."""
    fp = fp or FlowParams()
    ep = ep or ElasticityParams()
    if g is None:
        g = shape_gradient(s, sp_, fp)
    diam = s.polygon.diameter
    gmax = float(np.max(np.abs(g)))
    if gmax <= sp_.stationarity * s.lambda_hat / diam:
        return replace(s, stalled=True, reason="stationary"), g
    bg = boundary_trace(s.mesh)
    w = elasticity_smooth(s.mesh, -g[:, None] * bg.normals, ep)[s.mesh.boundary]
    # only the normal part changes the shape to first order
    wn = np.sum(w * bg.normals, axis=1)
    w = wn[:, None] * bg.normals
    wmax = float(np.max(np.abs(wn)))
    if wmax == 0.0:
        return replace(s, stalled=True, reason="zero displacement"), g
    gnorm = float(np.linalg.norm(g))
    step = s.step_size
    for _ in range(sp_.max_halvings + 1):
        if step < sp_.min_step:
            break
        disp = w * (step / wmax)
        try:
            cand = _candidate_mesh(s.mesh, disp, sp_)
        except InsuloptError:
            step *= 0.5
            continue
        if is_feasible(cand, sp_):
            init = _transfer(s.u, s.mesh, cand)
            lam, eig = evaluate(cand, sp_, fp, init=init)
            if lam <= s.lambda_hat - sp_.armijo * step * gnorm:
                new_step = min(step * sp_.step_growth, sp_.max_step)
                return ShapeState(cand.boundary_polygon(), cand, eig, lam, new_step), g
        step *= 0.5
    return replace(s, stalled=True, reason="line search failed"), g


@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    crosschecks: list = field(default_factory=list)

    @property
    def final(self):
        return self.states[-1]


TRAJECTORY_COLUMNS = ("iter", "lambda_hat", "area", "perimeter", "step_size", "grad_max", "accepted")


def _row(k, s, gmax, accepted):
    area, per = mesh_measures(s.mesh)
    return (k, s.lambda_hat, area, per, s.step_size, gmax, int(accepted))


def optimize(initial, sp_, fp=None, ep=None, budget=50, seed=0, callback=None):
    """Descend from ``initial`` (a ConvexPolygon or ShapeState) until stalled or out of budget."""
    fp = fp or FlowParams()
    ep = ep or ElasticityParams()
    s = initial if isinstance(initial, ShapeState) else initial_state(initial, sp_, fp, seed)
    traj = Trajectory([s], [_row(0, s, float("nan"), True)])
    for k in range(1, budget + 1):
        new, g = descend_step(s, sp_, fp, ep)
        gmax = float(np.max(np.abs(g)))
        accepted = not new.stalled
        traj.rows.append(_row(k, new, gmax, accepted))
        traj.states.append(new)
        s = new
        if sp_.crosscheck_every and accepted and k % sp_.crosscheck_every == 0:
            traj.crosschecks.append((k, s.lambda_hat, crosscheck(s, sp_, fp)))
        if callback is not None:
            callback(k, s)
        if new.stalled:
            break
    return traj


def crosscheck(s, sp_, fp=None):
    """Normalized eigenvalue of the current polygon on a fresh mesh."""
    poly = s.polygon.scaled(math.sqrt(sp_.v_target / s.polygon.area))
    mesh = triangulate(poly, sp_.h, sp_.c_usr)
    lam, _ = evaluate(mesh, sp_, fp or FlowParams(), init=_transfer(s.u, s.mesh, mesh))
    return lam


def isoperimetric_ratio(s):
    area, per = mesh_measures(s.mesh)
    return per * per / (4.0 * math.pi * area)
