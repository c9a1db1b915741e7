"""Command-line entry point ``insulopt``."""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import InsuloptError, NoConvergence
from .experiments import (
    ENDPOINT_EPS,
    SWEEP_COLUMNS,
    BracketFailure,
    critical_mass,
    history_rows,
    q_grid,
    run_sweep,
)
from .fem import fe_system
from .fileio import read_polygon, write_csv, write_polygon, write_vtk
from .flow import FlowParams, eigenvalue_no_lower_bound, initial_field, robin_reference, run_flow
from .geometry import ConvexPolygon, disk_polygon, make_regular_polygon, mesh_measures, triangulate
from .insulation import InsulationParams
from .shape import ShapeParams, TRAJECTORY_COLUMNS, isoperimetric_ratio, optimize

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_BRACKET, EXIT_IO = 0, 2, 3, 4, 5
COMMANDS = ("eig", "sweep", "critical-mass", "shape-opt", "mesh")

EIG_COLUMNS = ("m_hat", "q", "ell_min", "m", "lambda", "iterations", "residual", "c_u",
               "perimeter", "area", "density_cv", "robin_lambda", "converged")
MESH_COLUMNS = ("nodes", "triangles", "boundary_nodes", "h_max", "quality", "area", "perimeter")
CRITICAL_COLUMNS = ("step", "m", "f", "iterations", "early_stop")
CRITICAL_SUMMARY_COLUMNS = ("m0", "lo", "hi", "mu2", "h", "nodes")
SHAPE_COLUMNS = TRAJECTORY_COLUMNS + ("isoperimetric_ratio", "max_turning_angle", "vertices")
CROSSCHECK_COLUMNS = ("iter", "lambda_hat", "lambda_hat_remeshed")

HELP_EPILOG = """\
configuration
  The config file holds one 'key = value' per line ('#' starts a comment).
  Any key may be overridden on the command line as '--key value'.

  domain          disk | ngon | square | polygon          (default disk)
  n               vertex count of ngon / disk polygon     (default: chord <= h/2)
  r               radius of disk / ngon, length units     (default 1)
  side            side length of square, length units     (default 1)
  polygon_file    text file with one 'x y' pair per line, counter-clockwise
  h               maximal mesh size, length units; '2^-5' style accepted
  m_hat           total film mass, area units in 2D       (default 1)
  q               lower-bound fraction, ell_min = q m_hat / perimeter, in [0, 1]
  q_points        sweep grid q = i/(q_points-1)           (default 21)
  q_grid          explicit comma-separated sweep grid (overrides q_points)
  tau             pseudo-time step of the flow            (default 1)
  eps_stop        stop when the H1 norm of the increment is below this
  max_iter        iteration cap of one flow run
  solver          direct | cg
  m_lo, m_hi      critical-mass bracket, area units       (default 0.5, 4)
  width           critical-mass bracket width to reach    (default 1e-3)
  budget          shape-descent iterations                (default 50)
  step_size       initial shape step, length units        (default 0.05)
  snapshot_every  shape snapshots every N iterations      (default 10)

exit codes
  0 success, 2 invalid input or infeasible parameters, 3 no convergence,
  4 critical-mass bracket without sign change, 5 file-system error
"""


class ConfigError(ValueError):
    pass


def parse_number(text):
    """Float from plain notation or powers written as 'a^b'."""
    s = str(text).strip()
    if "^" in s:
        base, exp = s.split("^", 1)
        try:
            return float(base) ** float(exp)
        except ValueError:
            raise ConfigError(f"not a number: {text!r}") from None
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


@dataclass(frozen=True)
class RunConfig:
    command: str
    out: Path
    domain: str = "disk"
    n: int = 0
    r: float = 1.0
    side: float = 1.0
    polygon_file: str = ""
    h: float = 2.0 ** -4
    m_hat: float = 1.0
    q: float = 0.5
    q_points: int = 21
    q_grid: str = ""
    tau: float = 1.0
    eps_stop: float = 1e-6
    max_iter: int = 5000
    solver: str = "direct"
    m_lo: float = 0.5
    m_hi: float = 4.0
    width: float = 1e-3
    budget: int = 50
    step_size: float = 0.05
    snapshot_every: int = 10
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.domain not in ("disk", "ngon", "square", "polygon"):
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.domain == "polygon" and not self.polygon_file:
            raise ConfigError("domain = polygon needs polygon_file")
        if not 0.0 <= self.q <= 1.0:
            raise ConfigError("q must lie in [0, 1]")
        for name in ("h", "m_hat", "r", "side", "tau", "eps_stop", "width", "step_size"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.max_iter < 1 or self.budget < 0 or self.snapshot_every < 1:
            raise ConfigError("iteration counts must be positive")

    @property
    def flow(self):
        return FlowParams(tau=self.tau, eps_stop=self.eps_stop, max_iter=self.max_iter,
                          solver=self.solver)

    def grid(self):
        if self.q_grid.strip():
            qs = [parse_number(x) for x in self.q_grid.split(",") if x.strip()]
        else:
            qs = q_grid(self.q_points)
        if not qs:
            raise ConfigError("empty q-grid")
        if any(not 0.0 <= q <= 1.0 for q in qs):
            raise ConfigError("q-grid values must lie in [0, 1]")
        if any(b <= a for a, b in zip(qs, qs[1:])):
            raise ConfigError("q-grid must be strictly increasing")
        return qs


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name, value):
    kind = _FIELDS[name].type
    if kind == "int":
        x = parse_number(value)
        if x != int(x):
            raise ConfigError(f"{name} must be an integer")
        return int(x)
    if kind == "float":
        return parse_number(value)
    return str(value).strip()


def read_config(path):
    """``key = value`` pairs of a config file."""
    out = {}
    for k, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{k}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _overrides(extra):
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for {tok}")
        out[key.replace("-", "_")] = value
    return out


def build_config(command, out, config=None, overrides=None, seed=0, threads=1):
    raw = dict(config or {})
    raw.update(overrides or {})
    kw = {}
    for key, value in raw.items():
        if key in ("command", "out") or key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = _coerce(key, value)
    kw.setdefault("seed", seed)
    kw.setdefault("threads", threads)
    return RunConfig(command=command, out=Path(out), **kw)


# ---------------------------------------------------------------------------
# domains


def domain_polygon(cfg):
    if cfg.domain == "polygon":
        try:
            return read_polygon(cfg.polygon_file)
        except OSError as exc:
            raise ConfigError(f"cannot read polygon file: {exc}") from None
    if cfg.domain == "square":
        s = cfg.side
        return ConvexPolygon([[0.0, 0.0], [s, 0.0], [s, s], [0.0, s]])
    if cfg.n:
        return make_regular_polygon(cfg.n, cfg.r)
    if cfg.domain == "ngon":
        raise ConfigError("domain = ngon needs n")
    return disk_polygon(cfg.h, cfg.r)


def domain_mesh(cfg):
    return triangulate(domain_polygon(cfg), cfg.h)


def _boundary_fields(mesh, result):
    bg = fe_system(mesh).boundary
    ell = np.zeros(mesh.n_nodes)
    ell[bg.nodes] = result.density.values
    ell_hat = np.zeros(mesh.n_nodes)
    ell_hat[bg.nodes] = result.density.total
    return {"u": result.u, "ell": ell, "ell_hat": ell_hat}


# ---------------------------------------------------------------------------
# commands


def cmd_eig(cfg):
    mesh = domain_mesh(cfg)
    area, per = mesh_measures(mesh)
    p = InsulationParams.from_q(cfg.m_hat, cfg.q, per)
    fp = cfg.flow
    if cfg.q == 0.0:
        res = eigenvalue_no_lower_bound(mesh, cfg.m_hat, fp, seed=cfg.seed, sharpen_to=ENDPOINT_EPS)
    else:
        res = run_flow(initial_field(mesh, cfg.m_hat, seed=cfg.seed), mesh, p, fp)
    bg = fe_system(mesh).boundary
    c_u = res.density.c if res.density.c is not None else float("nan")
    row = (cfg.m_hat, cfg.q, p.ell_min, p.m, res.lam, res.iterations, res.residual, c_u, per, area,
           res.density_cv(bg), robin_reference(mesh, cfg.m_hat), int(res.converged))
    write_csv(cfg.out / "eig.csv", EIG_COLUMNS, [row])
    write_vtk(cfg.out / "eig.vtk", mesh, _boundary_fields(mesh, res))
    if not res.converged:
        raise NoConvergence(f"flow stopped after {res.iterations} iterations, "
                            f"step norm {res.residual:.3e}", residual=res.residual,
                            iterations=res.iterations)
    return EXIT_OK


def cmd_sweep(cfg):
    qs = cfg.grid()
    mesh = domain_mesh(cfg)
    rows = run_sweep(mesh, cfg.m_hat, qs, cfg.flow, cfg.seed, cfg.threads)
    write_csv(cfg.out / "sweep.csv", SWEEP_COLUMNS, rows)
    ok = sum(r["status"] == "ok" for r in rows)
    if ok < 0.9 * len(rows):
        print(f"insulopt: only {ok} of {len(rows)} sweep cells succeeded", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_critical_mass(cfg):
    mesh = domain_mesh(cfg)
    fp = replace(cfg.flow, max_iter=min(cfg.max_iter, 400))
    history = []
    try:
        cm = critical_mass(mesh, cfg.m_lo, cfg.m_hi, cfg.width, fp, cfg.seed, log=history.append)
    finally:
        write_csv(cfg.out / "critical_mass_history.csv", CRITICAL_COLUMNS, history_rows(history))
    write_csv(cfg.out / "critical_mass.csv", CRITICAL_SUMMARY_COLUMNS,
              [(cm.estimate, cm.lo, cm.hi, cm.mu2, cfg.h, mesh.n_nodes)])
    return EXIT_OK


def _snapshot(out, k, state):
    write_polygon(out / f"shape_{k:04d}.txt", state.polygon)
    write_vtk(out / f"shape_{k:04d}.vtk", state.mesh, {"u": state.u})


def cmd_shape_opt(cfg):
    poly = domain_polygon(cfg)
    sp_ = ShapeParams.from_q(cfg.m_hat, cfg.q, h=cfg.h, step_size=cfg.step_size,
                             workers=cfg.threads)
    fp = replace(cfg.flow, max_iter=min(cfg.max_iter, 2000))
    out = cfg.out

    def on_step(k, s):
        if k % cfg.snapshot_every == 0 and not s.stalled:
            _snapshot(out, k, s)

    traj = optimize(poly, sp_, fp, budget=cfg.budget, seed=cfg.seed, callback=on_step)
    _snapshot(out, 0, traj.states[0])
    rows = [r + (isoperimetric_ratio(s), s.polygon.max_turning_angle(), s.polygon.n)
            for r, s in zip(traj.rows, traj.states)]
    write_csv(out / "trajectory.csv", SHAPE_COLUMNS, rows)
    write_csv(out / "crosscheck.csv", CROSSCHECK_COLUMNS, traj.crosschecks)
    final = traj.final
    last_k = len(traj.states) - 1
    while last_k > 0 and traj.states[last_k].stalled:
        last_k -= 1
    write_polygon(out / "final_shape.txt", final.polygon)
    write_csv(out / "summary.csv", ("initial_lambda_hat", "final_lambda_hat", "iterations",
                                    "stalled", "reason", "isoperimetric_ratio"),
              [(traj.states[0].lambda_hat, final.lambda_hat, last_k, int(final.stalled),
                final.reason or "budget", isoperimetric_ratio(final))])
    return EXIT_OK


def cmd_mesh(cfg):
    poly = domain_polygon(cfg)
    mesh = triangulate(poly, cfg.h)
    area, per = mesh_measures(mesh)
    write_vtk(cfg.out / "mesh.vtk", mesh)
    write_polygon(cfg.out / "polygon.txt", poly)
    write_csv(cfg.out / "mesh.csv", MESH_COLUMNS,
              [(mesh.n_nodes, len(mesh.triangles), len(mesh.boundary), mesh.h_max, mesh.quality,
                area, per)])
    return EXIT_OK


HANDLERS = {"eig": cmd_eig, "sweep": cmd_sweep, "critical-mass": cmd_critical_mass,
            "shape-opt": cmd_shape_opt, "mesh": cmd_mesh}


def make_parser():
    ap = argparse.ArgumentParser(
        prog="insulopt", description="Optimal insulation eigenvalues and shape descent in 2D.",
        epilog=HELP_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="key = value configuration file")
    ap.add_argument("--out", type=Path, required=True, help="output directory (created if missing)")
    ap.add_argument("--threads", type=int, default=1, help="worker processes (default 1)")
    ap.add_argument("--seed", type=int, default=0, help="seed of the initial perturbation")
    return ap


def run(argv=None):
    ap = make_parser()
    args, extra = ap.parse_known_args(argv)
    try:
        config = read_config(args.config) if args.config else {}
        cfg = build_config(args.command, args.out, config, _overrides(extra), args.seed,
                           args.threads)
    except OSError as exc:
        print(f"insulopt: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ValueError) as exc:
        print(f"insulopt: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        probe = cfg.out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"insulopt: output directory not writable: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return HANDLERS[cfg.command](cfg)
    except BracketFailure as exc:
        print(f"insulopt: {exc}", file=sys.stderr)
        return EXIT_BRACKET
    except NoConvergence as exc:
        print(f"insulopt: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (InsuloptError, ValueError) as exc:
        print(f"insulopt: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"insulopt: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
