import hashlib
import math
import subprocess
import sys

import pytest

from insulopt.cli import (
    CRITICAL_COLUMNS,
    EIG_COLUMNS,
    EXIT_BRACKET,
    EXIT_INPUT,
    EXIT_IO,
    EXIT_OK,
    MESH_COLUMNS,
    SHAPE_COLUMNS,
    ConfigError,
    build_config,
    parse_number,
    read_config,
    run,
)
from insulopt.experiments import SWEEP_COLUMNS
from insulopt.fileio import read_csv, read_vtk

# pinned on first run of `insulopt mesh`
DISK64_VTK_SHA256 = "454e0b9176c1cb9fcd471a7da3c09f6e2478204226a3aaa9dfeecd598c4e006e"
SQUARE_VTK_SHA256 = "7eddb10ee6e72c4f04b692155956a6a81360730a9d1154aa41d7f573dabedca1"


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_parse_number_and_config_file(tmp_path):
    assert parse_number("2^-5") == 2.0 ** -5
    assert parse_number(" 0.25 ") == 0.25
    with pytest.raises(ConfigError):
        parse_number("two")
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nh = 2^-3\nm-hat = 2   # mass\n\nq_grid = 0, 0.5, 1\n")
    raw = read_config(path)
    assert raw == {"h": "2^-3", "m_hat": "2", "q_grid": "0, 0.5, 1"}
    cfg = build_config("sweep", tmp_path, raw, {"m_hat": "3"})
    assert (cfg.h, cfg.m_hat, cfg.grid()) == (0.125, 3.0, [0.0, 0.5, 1.0])
    path.write_text("h 0.1\n")
    with pytest.raises(ConfigError):
        read_config(path)


@pytest.mark.parametrize("overrides", [{"bogus": "1"}, {"q": "1.5"}, {"h": "-1"}, {"n": "2.5"},
                                       {"domain": "torus"}, {"domain": "polygon"},
                                       {"q_grid": "0.5, 0.2"}])
def test_invalid_config_is_rejected(tmp_path, overrides):
    with pytest.raises(ConfigError):
        build_config("sweep", tmp_path, {}, overrides).grid()


def test_help_documents_units_and_exit_codes():
    out = subprocess.run([sys.executable, "-m", "insulopt.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    assert "exit codes" in out and "length units" in out
    for code in ("0 success", "2 invalid input", "3 no convergence", "4 critical-mass", "5 file"):
        assert code in out


def test_mesh_disk_matches_golden(tmp_path):
    assert run(["mesh", "--out", str(tmp_path), "--domain", "disk", "--n", "64", "--h", "2^-4"]) == 0
    assert sha256(tmp_path / "mesh.vtk") == DISK64_VTK_SHA256
    cols, rows = read_csv(tmp_path / "mesh.csv")
    assert tuple(cols) == MESH_COLUMNS
    assert (rows[0]["nodes"], rows[0]["triangles"], rows[0]["boundary_nodes"]) == (1915, 3636, 192)
    assert rows[0]["area"] == pytest.approx(32 * math.sin(2 * math.pi / 64), rel=1e-13)


def test_mesh_square_matches_golden(tmp_path):
    assert run(["mesh", "--out", str(tmp_path), "--domain", "square", "--h", "0.5"]) == 0
    assert sha256(tmp_path / "mesh.vtk") == SQUARE_VTK_SHA256
    _, rows = read_csv(tmp_path / "mesh.csv")
    assert (rows[0]["nodes"], rows[0]["triangles"], rows[0]["boundary_nodes"]) == (23, 28, 16)
    assert (rows[0]["area"], rows[0]["perimeter"]) == (1, 4)
    nodes, tris, _ = read_vtk(tmp_path / "mesh.vtk")
    assert nodes.shape == (23, 2) and tris.shape == (28, 3)


def test_polygon_domain_and_invalid_polygon_file(tmp_path):
    poly = tmp_path / "tri.txt"
    poly.write_text("0 0\n2 0\n0 2\n")
    out = tmp_path / "ok"
    assert run(["mesh", "--out", str(out), "--domain", "polygon", "--polygon_file", str(poly),
                "--h", "0.5"]) == EXIT_OK
    assert read_csv(out / "mesh.csv")[1][0]["area"] == pytest.approx(2.0, rel=1e-14)
    poly.write_text("0 0\n1 one\n0 1\n")
    assert run(["mesh", "--out", str(tmp_path / "bad"), "--domain", "polygon",
                "--polygon_file", str(poly)]) == EXIT_INPUT
    assert run(["mesh", "--out", str(tmp_path / "bad"), "--domain", "polygon",
                "--polygon_file", str(tmp_path / "missing.txt")]) == EXIT_INPUT


def test_eig_rejects_fraction_above_one(tmp_path):
    assert run(["eig", "--out", str(tmp_path), "--q", "1.5"]) == EXIT_INPUT
    assert not (tmp_path / "eig.csv").exists()


def test_eig_full_fraction_matches_robin_column(tmp_path):
    assert run(["eig", "--out", str(tmp_path), "--h", "2^-3", "--m_hat", "2", "--q", "1",
                "--eps_stop", "1e-9"]) == EXIT_OK
    cols, rows = read_csv(tmp_path / "eig.csv")
    assert tuple(cols) == EIG_COLUMNS
    r = rows[0]
    assert r["lambda"] == pytest.approx(r["robin_lambda"], rel=1e-8)
    assert r["density_cv"] < 1e-8 and r["converged"] == 1
    fields = read_vtk(tmp_path / "eig.vtk")[2]
    assert set(fields) == {"u", "ell", "ell_hat"}


def test_eig_half_fraction_breaks_uniform_film(tmp_path):
    assert run(["eig", "--out", str(tmp_path), "--h", "2^-4", "--m_hat", "1", "--q", "0.5"]) == 0
    r = read_csv(tmp_path / "eig.csv")[1][0]
    assert r["density_cv"] > 0.1
    assert r["lambda"] < r["robin_lambda"]
    assert r["c_u"] > 0 and r["area"] == pytest.approx(math.pi, rel=1e-3)


def test_sweep_below_critical_mass_is_monotone(tmp_path):
    assert run(["sweep", "--out", str(tmp_path), "--h", "2^-3", "--m_hat", "1",
                "--eps_stop", "1e-5"]) == EXIT_OK
    cols, rows = read_csv(tmp_path / "sweep.csv")
    assert tuple(cols) == SWEEP_COLUMNS and len(rows) == 21
    assert all(r["status"] == "ok" for r in rows)
    lam = [r["lambda"] for r in rows]
    assert all(b >= a - 1e-6 for a, b in zip(lam, lam[1:]))
    assert rows[-1]["density_cv"] == 0 and rows[-1]["iters"] == 0


@pytest.mark.parametrize("grid", ["q_points=1", "q_grid=,"])
def test_sweep_rejects_empty_grid(tmp_path, grid):
    assert run(["sweep", "--out", str(tmp_path), f"--{grid}"]) == EXIT_INPUT


def test_sweep_is_deterministic_across_thread_counts(tmp_path):
    args = ["sweep", "--h", "2^-2", "--m_hat", "1", "--q_grid", "0,0.3,0.6,1", "--max_iter", "300"]
    assert run(args + ["--out", str(tmp_path / "a"), "--threads", "1"]) in (0, 3)
    assert run(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) in (0, 3)
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_critical_mass_bracket_failure(tmp_path):
    assert run(["critical-mass", "--out", str(tmp_path), "--h", "2^-2", "--m_lo", "2.5"]) == EXIT_BRACKET
    cols, rows = read_csv(tmp_path / "critical_mass_history.csv")
    assert tuple(cols) == CRITICAL_COLUMNS and len(rows) == 2
    assert not (tmp_path / "critical_mass.csv").exists()


def test_critical_mass_coarse(tmp_path):
    assert run(["critical-mass", "--out", str(tmp_path), "--h", "2^-3"]) == EXIT_OK
    r = read_csv(tmp_path / "critical_mass.csv")[1][0]
    # within 0.15 of the fine-mesh value; the reported mu2 is close to j'_{1,1}^2
    assert abs(r["m0"] - 1.8534) < 0.15
    assert r["hi"] - r["lo"] <= 1e-3 and r["lo"] <= r["m0"] <= r["hi"]
    assert r["mu2"] == pytest.approx(3.39, rel=5e-3)
    hist = read_csv(tmp_path / "critical_mass_history.csv")[1]
    assert [h["step"] for h in hist] == list(range(len(hist)))


def test_shape_opt_stalls_at_disk_for_large_mass(tmp_path):
    out = tmp_path / "nested" / "missing"
    assert run(["shape-opt", "--out", str(out), "--h", "2^-3", "--m_hat", "3", "--q", "0.8",
                "--budget", "5"]) == EXIT_OK
    s = read_csv(out / "summary.csv")[1][0]
    assert s["stalled"] == 1 and s["reason"] == "stationary"
    assert s["final_lambda_hat"] == s["initial_lambda_hat"]
    cols, rows = read_csv(out / "trajectory.csv")
    assert tuple(cols) == SHAPE_COLUMNS and rows
    for name in ("crosscheck.csv", "final_shape.txt", "shape_0000.txt", "shape_0000.vtk"):
        assert (out / name).exists()
    assert set(read_vtk(out / "shape_0000.vtk")[2]) == {"u"}


def test_unwritable_output_exits_with_io_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run(["mesh", "--out", str(blocker / "sub"), "--h", "0.5"]) == EXIT_IO


def test_missing_config_file_is_input_error(tmp_path):
    assert run(["mesh", "--out", str(tmp_path), "--config", str(tmp_path / "none.cfg")]) == EXIT_INPUT
