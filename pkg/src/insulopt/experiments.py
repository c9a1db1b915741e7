"""Experiment drivers: q-sweeps and the critical-mass bisection."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InsuloptError, InvalidArgument
from .fem import fe_system
from .flow import (
    FlowParams,
    eigenvalue_no_lower_bound,
    initial_field,
    neumann_mu2,
    robin_reference,
    run_flow,
)
from .insulation import InsulationParams

SWEEP_COLUMNS = ("q", "ell_min", "m", "lambda", "iters", "density_cv", "status")
# final regularization width of the q = 0 endpoint; the default width alone
# leaves that endpoint above its q > 0 neighbours on coarse meshes
ENDPOINT_EPS = 1e-6


class BracketFailure(InsuloptError):
    """The initial mass interval does not bracket a sign change."""


def q_grid(n):
    """The grid q = i / (n - 1), i = 0..n-1."""
    if n < 2:
        raise InvalidArgument("a q-grid needs at least two points")
    return [i / (n - 1) for i in range(n)]


def sweep_cell(mesh, m_hat, q, fp, seed=0):
    """One sweep row as a dict; failures are reported in ``status``."""
    bg = fe_system(mesh).boundary
    row = {"q": q, "ell_min": float("nan"), "m": float("nan"), "lambda": float("nan"),
           "iters": 0, "density_cv": float("nan"), "status": "ok"}
    try:
        p = InsulationParams.from_q(m_hat, q, bg.perimeter)
        row["ell_min"] = p.ell_min
        row["m"] = p.m
        if q == 1.0:
            # constant film: the Robin problem with alpha = |boundary| / m_hat
            row["lambda"] = robin_reference(mesh, m_hat)
            row["density_cv"] = 0.0
            return row
        if q == 0.0:
            res = eigenvalue_no_lower_bound(mesh, m_hat, fp, seed=seed, sharpen_to=ENDPOINT_EPS)
        else:
            res = run_flow(initial_field(mesh, m_hat, seed=seed), mesh, p, fp)
        row["lambda"] = res.lam
        row["iters"] = res.iterations
        row["density_cv"] = res.density_cv(bg)
        if not res.converged:
            row["status"] = "max-iter"
    except InsuloptError as exc:
        row["status"] = type(exc).__name__
    return row


def _cell(args):
    return sweep_cell(*args)


def run_sweep(mesh, m_hat, qs, fp=None, seed=0, threads=1):
    """Rows of a q-sweep in grid order (independent of ``threads``)."""
    fp = fp or FlowParams()
    qs = list(qs)
    if not qs:
        raise InvalidArgument("empty q-grid")
    if any(not 0.0 <= q <= 1.0 for q in qs) or any(b <= a for a, b in zip(qs, qs[1:])):
        raise InvalidArgument("q-grid must be strictly increasing inside [0, 1]")
    jobs = [(mesh, m_hat, q, fp, seed) for q in qs]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            return list(pool.map(_cell, jobs))
    return [_cell(j) for j in jobs]


@dataclass
class MassProbe:
    m: float
    f: float
    iterations: int
    early_stop: bool


@dataclass
class CriticalMass:
    estimate: float
    lo: float
    hi: float
    mu2: float
    history: list = field(default_factory=list)


def mass_gap(mesh, m_hat, mu2, fp, seed=0):
    """Sign-reliable value of lambda_m - mu2 without a lower film bound.

    The flow stops as soon as its Rayleigh quotient (an upper bound of the
    eigenvalue) drops below ``mu2``, which settles a negative sign. A run
    that reaches the iteration cap keeps a quotient above ``mu2`` and is
    read as a positive sign.
    """
    stopped = []

    def below(state, rq):
        if rq < mu2:
            stopped.append(rq)
            return True
        return False

    res = eigenvalue_no_lower_bound(mesh, m_hat, fp, seed=seed, callback=below)
    f = (min(res.lam, stopped[0]) if stopped else res.lam) - mu2
    return MassProbe(m_hat, f, res.iterations, bool(stopped))


def critical_mass(mesh, lo=0.5, hi=4.0, width=1e-3, fp=None, seed=0, log=None):
    """Bisection for the mass at which the insulation eigenvalue meets mu2."""
    if not 0.0 < lo < hi:
        raise InvalidArgument("need 0 < lo < hi")
    if not width > 0:
        raise InvalidArgument("width must be positive")
    fp = fp or FlowParams(max_iter=400)
    mu2 = neumann_mu2(mesh)
    out = CriticalMass(math.nan, lo, hi, mu2)
    flo = mass_gap(mesh, lo, mu2, fp, seed)
    fhi = mass_gap(mesh, hi, mu2, fp, seed)
    out.history += [flo, fhi]
    if log:
        log(flo)
        log(fhi)
    if not (flo.f > 0.0 > fhi.f):
        raise BracketFailure(f"no sign change on [{lo}, {hi}]: f = {flo.f:.6g}, {fhi.f:.6g}")
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        probe = mass_gap(mesh, mid, mu2, fp, seed)
        out.history.append(probe)
        if log:
            log(probe)
        if probe.f > 0.0:
            lo = mid
        else:
            hi = mid
    out.lo, out.hi = lo, hi
    out.estimate = 0.5 * (lo + hi)
    return out


def history_rows(probes):
    """Bracket history as rows (step, m, f, iterations, early_stop)."""
    return [(k, p.m, p.f, p.iterations, int(p.early_stop)) for k, p in enumerate(probes)]


def monotone_violation(values):
    """Largest decrease along a sequence (0 when non-decreasing)."""
    v = np.asarray(values, float)
    return float(max(0.0, np.max(v[:-1] - v[1:]))) if len(v) > 1 else 0.0
