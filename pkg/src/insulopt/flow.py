"""Energy-decreasing iterative minimization of the insulation eigenvalue.

Each step solves, for the increment ``d`` of the unnormalized iterate,

    (d, v)_* + a_{ell_{k-1}}(u_{k-1} + tau d, v) = 0   for v with (u_{k-1}, v) = 0,

where ``(., .)_*`` is the H1 inner product, ``(., .)`` the L2 inner product
and ``a_ell`` the bilinear form with boundary weight ``1 / (ell_min + ell)``.
Then ``u_k = u_{k-1} + tau d`` and the density is re-optimized for ``u_k``.
The constraint is imposed with a Lagrange multiplier; eliminating it leaves
two solves with the SPD matrix ``S + tau A``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NoConvergence
from .fem import Factorized, GAUSS_W, fe_system, gauss_points, smallest_generalized_eig, solve_spd
from .insulation import (
    InsulationParams,
    _abs_pieces,
    boundary_energy,
    density_from_values,
    optimal_density,
)

# callables invoked with every finished EigenResult (used for auditing invariants)
RUN_HOOKS = []


@dataclass(frozen=True)
class FlowParams:
    """Pseudo-time step, stopping threshold and iteration cap of the flow.

    The step metric is always the full H1 inner product. ``solver`` selects
    Jacobi-CG (``"cg"``) or a sparse factorization (``"direct"``) for the
    inner SPD systems.
    """

    tau: float = 1.0
    eps_stop: float = 1e-6
    max_iter: int = 5000
    solver: str = "direct"
    cg_tol: float = 1e-12
    star_product: str = "H1"

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidArgument("tau must be positive")
        if not self.eps_stop > 0:
            raise InvalidArgument("eps_stop must be positive")
        if int(self.max_iter) < 1:
            raise InvalidArgument("max_iter must be >= 1")
        if self.solver not in ("cg", "direct"):
            raise InvalidArgument("solver must be 'cg' or 'direct'")
        if self.star_product != "H1":
            raise InvalidArgument("only the H1 step metric is supported")


@dataclass(frozen=True, eq=False)
class FlowState:
    k: int
    u: np.ndarray
    density: object
    energy: float
    last_step_norm: float
    # tau * sum ||d||_*^2 and tau^2 * sum ||d||_{L2}^2
    dissipated: float
    l2_growth: float
    energy0: float
    boundary_matrix: object = field(repr=False, default=None)
    c_u: float = float("nan")


@dataclass(frozen=True, eq=False)
class EigenResult:
    lam: float
    u: np.ndarray
    density: object
    iterations: int
    residual: float
    converged: bool
    energy0: float
    energy: float
    dissipated: float
    l2_norm_sq: float
    l2_growth: float
    log: list = field(repr=False, default_factory=list)
    params: InsulationParams | None = None
    state: FlowState | None = field(repr=False, default=None)

    @property
    def flag(self):
        return "converged" if self.converged else "max-iter"

    @property
    def energy_defect(self):
        """(J_K + tau sum ||d||_*^2 - J_0) / J_0; non-positive for a valid run."""
        return (self.energy + self.dissipated - self.energy0) / self.energy0

    @property
    def norm_defect(self):
        """Relative violation of ||u_K||^2 = 1 + tau^2 sum ||d||^2."""
        return abs(self.l2_norm_sq - 1.0 - self.l2_growth) / self.l2_norm_sq

    def density_cv(self, bg):
        return self.density.coefficient_of_variation(bg)


# ---------------------------------------------------------------------------
# boundary models


class _LowerBoundModel:
    """Boundary term with lower film bound and exact optimal density."""

    def __init__(self, system, p):
        if p.ell_min <= 0:
            raise InvalidArgument("ell_min must be positive; use eigenvalue_no_lower_bound")
        self.system = system
        self.p = p

    def evaluate(self, u):
        bg = self.system.boundary
        ub = u[bg.nodes]
        d = optimal_density(bg, ub, self.p)
        energy = float(u @ (self.system.stiffness @ u)) + boundary_energy(bg, ub, d)
        return d, energy, d.boundary_matrix(bg), (d.c if d.c is not None else 0.0)


class _NoLowerBoundModel:
    """int |grad u|^2 + (1/m) (int sqrt(u^2 + eps^2) ds)^2, majorized at the last iterate."""

    def __init__(self, system, m_hat, eps):
        self.system = system
        self.m_hat = m_hat
        self.eps = eps
        bg = system.boundary
        n = bg.n
        self.s = gauss_points(np.zeros(n), np.ones(n))
        self.ds = bg.edge_lengths[:, None] * GAUSS_W
        self.edge = np.arange(n)

    def _abs_eps(self, ub):
        u = (1.0 - self.s) * ub[:, None] + self.s * np.roll(ub, -1)[:, None]
        return np.sqrt(u * u + self.eps * self.eps)

    def evaluate(self, u):
        from .fem import assemble_boundary_segments

        bg = self.system.boundary
        ub = u[bg.nodes]
        a = self._abs_eps(ub)
        total = float(np.sum(a * self.ds))
        energy = float(u @ (self.system.stiffness @ u)) + total * total / self.m_hat
        w = total / (self.m_hat * a)
        n = bg.n
        b = assemble_boundary_segments(bg, self.edge, np.zeros(n), np.ones(n), w)
        return None, energy, b, float("nan")


# ---------------------------------------------------------------------------
# the flow


def _star_norm_sq(system, d):
    return float(d @ (system.stiffness @ d) + d @ (system.mass @ d))


class _Stepper:
    def __init__(self, system, fp):
        self.system = system
        self.fp = fp
        self.star = system.stiffness + system.mass
        self._x1 = None
        self._x2 = None

    def increment(self, u, bmat):
        """Solve the constrained step for the increment d."""
        sysm = self.system
        tau = self.fp.tau
        a = sysm.stiffness + bmat
        x = (self.star + tau * a).tocsr()
        r1 = a @ u
        mu_ = sysm.mass @ u
        if self.fp.solver == "direct":
            op = Factorized(x)
            y1, y2 = op.solve(r1), op.solve(mu_)
        else:
            y1 = solve_spd(x, r1, tol=self.fp.cg_tol, x0=self._x1)
            y2 = solve_spd(x, mu_, tol=self.fp.cg_tol, x0=self._x2)
            self._x1, self._x2 = y1, y2
        lagrange = float(mu_ @ y1) / float(mu_ @ y2)
        return lagrange * y2 - y1


def _initial_state(model, u0):
    u0 = np.array(u0, dtype=float)
    d, energy, bmat, c = model.evaluate(u0)
    return FlowState(0, u0, d, energy, float("inf"), 0.0, 0.0, energy, bmat, c)


def flow_step(s, stepper, model):
    """One iteration: constrained increment, update of u, density re-optimization."""
    fp = stepper.fp
    d = stepper.increment(s.u, s.boundary_matrix)
    u = s.u + fp.tau * d
    dens, energy, bmat, c = model.evaluate(u)
    nstar = _star_norm_sq(stepper.system, d)
    nl2 = float(d @ (stepper.system.mass @ d))
    return FlowState(s.k + 1, u, dens, energy, math.sqrt(nstar),
                     s.dissipated + fp.tau * nstar, s.l2_growth + fp.tau ** 2 * nl2,
                     s.energy0, bmat, c)


def _check_init(system, u0):
    u0 = np.asarray(u0, float)
    if u0.shape != (system.mesh.n_nodes,) or not np.all(np.isfinite(u0)):
        raise InvalidArgument("initial field must be finite with one value per node")
    nrm = float(u0 @ (system.mass @ u0))
    if abs(nrm - 1.0) > 1e-10:
        raise InvalidArgument(f"initial field must have unit L2 norm (got {nrm:.12g})")


def _iterate(system, model, u0, fp, callback):
    _check_init(system, u0)
    stepper = _Stepper(system, fp)
    s = _initial_state(model, u0)
    log = [(0, s.energy, float("nan"), 1.0, s.c_u)]
    converged = False
    while s.k < fp.max_iter:
        s = flow_step(s, stepper, model)
        l2 = float(s.u @ (system.mass @ s.u))
        log.append((s.k, s.energy, s.last_step_norm, l2, s.c_u))
        if s.last_step_norm <= fp.eps_stop:
            converged = True
            break
        if callback is not None and callback(s, s.energy / l2):
            break
    return s, log, converged


def _finish(system, s, log, converged, lam, density, p):
    l2 = float(s.u @ (system.mass @ s.u))
    u = s.u / math.sqrt(l2)
    res = EigenResult(lam, u, density, s.k, s.last_step_norm, converged, s.energy0, s.energy,
                      s.dissipated, l2, s.l2_growth, log, p, s)
    for hook in RUN_HOOKS:
        hook(res)
    return res


def run_flow(init, mesh, p, fp=None, callback=None):
    """Minimize J(u, ell) from ``init`` (unit L2 norm) until ||d||_* <= eps_stop.

    ``callback(state, rayleigh)`` may return True to stop early; the result
    is then flagged as not converged.
    """
    fp = fp or FlowParams()
    system = fe_system(mesh)
    if abs(p.perimeter - system.boundary.perimeter) > 1e-9 * p.perimeter:
        raise InvalidArgument("params perimeter does not match the mesh")
    model = _LowerBoundModel(system, p)
    s, log, converged = _iterate(system, model, init, fp, callback)
    # re-evaluate at the normalized eigenfunction
    bg = system.boundary
    u = s.u / math.sqrt(float(s.u @ (system.mass @ s.u)))
    dens = optimal_density(bg, u[bg.nodes], p)
    lam = float(u @ (system.stiffness @ u)) + boundary_energy(bg, u[bg.nodes], dens)
    return _finish(system, s, log, converged, lam, dens, p)


# ---------------------------------------------------------------------------
# reference problems and initialization


def robin_alpha(mesh, m_hat):
    return fe_system(mesh).boundary.perimeter / m_hat


def robin_eigenpair(mesh, alpha, tol=1e-11):
    system = fe_system(mesh)
    a = system.stiffness + alpha * system.boundary_mass
    return smallest_generalized_eig(a, system.mass, tol=tol)


def robin_reference(mesh, m_hat):
    """First Robin eigenvalue with alpha = |boundary| / m_hat (constant film)."""
    if not m_hat > 0:
        raise InvalidArgument("m_hat must be positive")
    return robin_eigenpair(mesh, robin_alpha(mesh, m_hat)).value


def neumann_mu2(mesh):
    """First non-zero Neumann eigenvalue (constants deflated)."""
    system = fe_system(mesh)
    return smallest_generalized_eig(system.stiffness, system.mass,
                                    deflate=np.ones(mesh.n_nodes), tol=1e-11).value


def initial_field(mesh, m_hat, amplitude=1e-2, seed=0):
    """Normalized first Robin mode plus a small multiple of the second one."""
    system = fe_system(mesh)
    alpha = robin_alpha(mesh, m_hat)
    a = system.stiffness + alpha * system.boundary_mass
    first = smallest_generalized_eig(a, system.mass, tol=1e-11)
    u = first.vector
    if amplitude:
        second = smallest_generalized_eig(a, system.mass, deflate=u, tol=1e-8, seed=seed)
        u = u + amplitude * second.vector
    return u / math.sqrt(float(u @ (system.mass @ u)))


def solve_eigenvalue(mesh, p, fp=None, seed=0, callback=None):
    """Flow started from :func:`initial_field`."""
    return run_flow(initial_field(mesh, p.m_hat, seed=seed), mesh, p, fp, callback)


def regularization_eps(mesh):
    return mesh.n_nodes ** -0.5 / 10.0


def trace_l1(bg, u_b):
    """Exact int |u| ds of the piecewise-linear trace."""
    e, t0, t1, a0, a1 = _abs_pieces(bg, np.asarray(u_b, float))
    return float(np.sum(bg.edge_lengths[e] * (t1 - t0) * 0.5 * (a0 + a1)))


def eigenvalue_no_lower_bound(mesh, m_hat, fp=None, init=None, seed=0, callback=None, eps=None,
                              sharpen_to=None):
    """Insulation eigenvalue without a lower film bound.

    |u| is regularized as sqrt(u^2 + eps^2) with eps = N^{-1/2}/10 and the
    squared-L1 boundary term is majorized at the previous iterate, which
    keeps the flow energy decreasing. The reported eigenvalue uses the
    unregularized functional and the film ``m_hat |u| / int |u| ds``.

    The regularization biases the value upward by roughly eps. With
    ``sharpen_to`` set, the run is continued from its own field with eps
    shrinking by factors of 100 down to ``sharpen_to``.
    """
    if not m_hat > 0:
        raise InvalidArgument("m_hat must be positive")
    fp = fp or FlowParams()
    system = fe_system(mesh)
    bg = system.boundary
    eps = regularization_eps(mesh) if eps is None else eps
    model = _NoLowerBoundModel(system, m_hat, eps)
    u0 = initial_field(mesh, m_hat, seed=seed) if init is None else init
    if sharpen_to is not None and not 0 < sharpen_to < eps:
        raise InvalidArgument("sharpen_to must lie in (0, eps)")
    s, log, converged = _iterate(system, model, u0, fp, callback)
    if sharpen_to is not None:
        while converged and eps > sharpen_to:
            eps = max(eps / 100.0, sharpen_to)
            u_prev = s.u / math.sqrt(float(s.u @ (system.mass @ s.u)))
            s, log, converged = _iterate(system, _NoLowerBoundModel(system, m_hat, eps), u_prev, fp,
                                         callback)
    u = s.u / math.sqrt(float(s.u @ (system.mass @ s.u)))
    ub = u[bg.nodes]
    l1 = trace_l1(bg, ub)
    lam = float(u @ (system.stiffness @ u)) + l1 * l1 / m_hat
    p = InsulationParams(m_hat, 0.0, bg.perimeter)
    a = np.abs(ub)
    dens = density_from_values(m_hat * a / float(np.sum(a * bg.lumped)), p)
    return _finish(system, s, log, converged, lam, dens, p)


def assert_invariants(result, energy_tol=1e-10, norm_tol=1e-8):
    """Raise AssertionError if a run violates energy decrease or the norm identity."""
    if result.energy + result.dissipated > result.energy0 + energy_tol * abs(result.energy0):
        raise AssertionError(f"energy telescoping violated: defect {result.energy_defect:.3e}")
    if result.norm_defect > norm_tol:
        raise AssertionError(f"norm identity violated: {result.norm_defect:.3e}")


__all__ = [
    "EigenResult", "FlowParams", "FlowState", "NoConvergence", "RUN_HOOKS", "assert_invariants",
    "eigenvalue_no_lower_bound", "flow_step", "initial_field", "neumann_mu2", "robin_alpha",
    "robin_eigenpair", "robin_reference", "run_flow", "solve_eigenvalue", "trace_l1",
]
