"""Volume normalization of domains and the matching rescaling of film parameters.

Under x -> t x in d dimensions the total and free masses scale with t^d and
the film thickness with t, so the eigenvalue scales with t^-2. Shape descent
therefore works with the eigenvalue of the domain rescaled to a reference
volume and never needs a volume constraint.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidArgument
from .fem import fe_system
from .flow import FlowParams, eigenvalue_no_lower_bound, initial_field, run_flow
from .geometry import mesh_measures
from .insulation import InsulationParams

V_UNIT_DISK = math.pi
DIM = 2


@dataclass(frozen=True)
class ScaleMap:
    t: float
    v_target: float = V_UNIT_DISK

    def __post_init__(self):
        if not self.t > 0:
            raise InvalidArgument("scale factor must be positive")

    @classmethod
    def for_area(cls, area, v_target=V_UNIT_DISK):
        if not area > 0:
            raise InvalidArgument("area must be positive")
        return cls(math.sqrt(v_target / area), v_target)


def rescale_params(t, p):
    """Parameters for the domain t * Omega.

    A rescaled set remembers its reference parameters and the accumulated
    factor, so that rescaling by t1 and then t2 reproduces rescaling by
    t1 * t2 bit for bit.
    """
    if not t > 0:
        raise InvalidArgument("scale factor must be positive")
    base, s = p.origin if p.origin is not None else (p, 1.0)
    s = s * t
    if s == 1.0:
        return base
    return InsulationParams(s ** DIM * base.m_hat, s * base.ell_min, s ** (DIM - 1) * base.perimeter,
                            origin=(base, s))


@dataclass(frozen=True, eq=False)
class ScaledEigen:
    lambda_hat: float
    t: float
    mesh: object
    params: InsulationParams
    eigen: object


def normalized_params(mesh, m_hat, ell_min):
    return InsulationParams(m_hat, ell_min, mesh_measures(mesh)[1])


def scaled_eigenvalue(mesh, p, fp=None, v_target=V_UNIT_DISK, init=None, seed=0):
    """Eigenvalue of the domain rescaled to volume ``v_target``.

    ``p`` gives ``m_hat`` and ``ell_min`` for the reference volume; its
    perimeter field is ignored and replaced by the perimeter of the
    normalized mesh. The computation runs on the similar mesh ``t * mesh``
    so similar inputs with power-of-two ratios give bitwise-equal results.
    ``init`` (nodal field on the same connectivity) warm-starts the flow.
    """
    fp = fp or FlowParams()
    area, _ = mesh_measures(mesh)
    sm = ScaleMap.for_area(area, v_target)
    mt = mesh.scaled(sm.t) if sm.t != 1.0 else mesh
    params = normalized_params(mt, p.m_hat, p.ell_min)
    system = fe_system(mt)
    if init is not None:
        u0 = init / math.sqrt(float(init @ (system.mass @ init)))
    else:
        u0 = initial_field(mt, p.m_hat, seed=seed)
    if p.ell_min == 0.0:
        res = eigenvalue_no_lower_bound(mt, p.m_hat, fp, init=u0)
    else:
        res = run_flow(u0, mt, params, fp)
    return ScaledEigen(res.lam, sm.t, mt, params, res)
