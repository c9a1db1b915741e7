import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse.linalg import spsolve

from insulopt.errors import InvalidArgument, InvalidWeight, NoConvergence
from insulopt.fem import (
    assemble_mass,
    assemble_stiffness,
    assemble_weighted_boundary_mass,
    fe_system,
    smallest_generalized_eig,
    solve_spd,
    write_matrix_market,
)
from insulopt.geometry import ConvexPolygon, boundary_trace, disk_mesh, make_regular_polygon, triangulate
from oracles import dense_smallest, disk_neumann_mu2

SQUARE = ConvexPolygon([[0, 0], [1, 0], [1, 1], [0, 1]])


@pytest.fixture(scope="module")
def small():
    return triangulate(make_regular_polygon(7, 1.0), 0.35)


def test_stiffness_annihilates_constants_and_linear_energy(small):
    k = assemble_stiffness(small)
    assert np.max(np.abs(k @ np.ones(small.n_nodes))) < 1e-13
    # |grad x|^2 integrates to the area
    x = small.nodes[:, 0]
    assert x @ (k @ x) == pytest.approx(small.signed_areas.sum(), rel=1e-13)


def test_mass_integrates_constants_and_quadratics(small):
    m = assemble_mass(small)
    one = np.ones(small.n_nodes)
    assert one @ (m @ one) == pytest.approx(small.signed_areas.sum(), rel=1e-14)
    # the consistent mass integrates products of P1 functions exactly: int x^2 over a square
    sq = triangulate(SQUARE, 0.3)
    x = sq.nodes[:, 0]
    assert x @ (assemble_mass(sq) @ x) == pytest.approx(1.0 / 3.0, rel=1e-13)


def test_matrices_are_bitwise_symmetric(small):
    for a in (assemble_stiffness(small), assemble_mass(small), fe_system(small).boundary_mass):
        assert (a != a.T).nnz == 0


def test_boundary_mass_measures_perimeter(small):
    s = fe_system(small)
    one = np.ones(small.n_nodes)
    assert one @ (s.boundary_mass @ one) == pytest.approx(s.boundary.perimeter, rel=1e-14)
    # int x^2 ds on the boundary of the unit square equals 2 * (1/3) + 1 = 5/3
    sq = triangulate(SQUARE, 0.3)
    x = sq.nodes[:, 0]
    assert x @ (fe_system(sq).boundary_mass @ x) == pytest.approx(5.0 / 3.0, rel=1e-13)


def test_weighted_boundary_mass_linear_weight(small):
    bg = boundary_trace(small)
    w = 1.0 + bg.points[:, 0] ** 2
    b = assemble_weighted_boundary_mass(bg, w)
    one = np.ones(small.n_nodes)
    expected = np.sum(bg.edge_lengths * 0.5 * (w + np.roll(w, -1)))
    assert one @ (b @ one) == pytest.approx(expected, rel=1e-13)
    with pytest.raises(InvalidWeight):
        assemble_weighted_boundary_mass(bg, -w)
    with pytest.raises(InvalidArgument):
        assemble_weighted_boundary_mass(bg, w[:-1])


def test_fe_system_is_cached(small):
    assert fe_system(small) is fe_system(small)
    assert fe_system(small).star.shape == (small.n_nodes, small.n_nodes)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_cg_matches_direct_solve(seed):
    m = triangulate(make_regular_polygon(6, 1.0), 0.3)
    s = fe_system(m)
    a = (s.stiffness + s.mass).tocsr()
    b = np.random.default_rng(seed).standard_normal(m.n_nodes)
    x = solve_spd(a, b, tol=1e-12)
    ref = spsolve(a.tocsc(), b)
    assert np.linalg.norm(a @ x - b) <= 1e-12 * np.linalg.norm(b)
    assert np.allclose(x, ref, rtol=1e-9, atol=1e-12)


def test_cg_zero_rhs_and_errors(small):
    s = fe_system(small)
    a = (s.stiffness + s.mass).tocsr()
    assert not np.any(solve_spd(a, np.zeros(small.n_nodes)))
    with pytest.raises(InvalidArgument):
        solve_spd(a, np.ones(small.n_nodes), tol=0.0)
    with pytest.raises(NoConvergence) as err:
        solve_spd(a, np.arange(small.n_nodes, dtype=float), tol=1e-14, maxiter=2)
    assert err.value.iterations == 2 and err.value.residual > 0


def test_smallest_eigenpair_matches_dense_solver(small):
    s = fe_system(small)
    a = s.stiffness + 2.0 * s.boundary_mass
    ref_w, _ = dense_smallest(a, s.mass)
    pair = smallest_generalized_eig(a, s.mass, tol=1e-11)
    assert pair.value == pytest.approx(ref_w[0], rel=1e-10)
    assert pair.vector @ (s.mass @ pair.vector) == pytest.approx(1.0, rel=1e-12)
    assert pair.residual <= 1e-11


def test_deflated_eigenpair_matches_dense_solver(small):
    s = fe_system(small)
    ones = np.ones(small.n_nodes)
    ref_w, _ = dense_smallest(s.stiffness, s.mass, k=1, deflate=ones)
    pair = smallest_generalized_eig(s.stiffness, s.mass, deflate=ones, tol=1e-11)
    assert pair.value == pytest.approx(ref_w[0], rel=1e-9)
    assert abs(pair.vector @ (s.mass @ ones)) < 1e-10


def test_eigenvalue_sign_convention_is_deterministic(small):
    s = fe_system(small)
    a = s.stiffness + s.boundary_mass
    p1 = smallest_generalized_eig(a, s.mass, seed=1)
    p2 = smallest_generalized_eig(a, s.mass, seed=2)
    assert p1.vector @ (s.mass @ p2.vector) > 0.999999


def test_eigen_iteration_cap_raises(small):
    s = fe_system(small)
    with pytest.raises(NoConvergence):
        smallest_generalized_eig(s.stiffness + s.boundary_mass, s.mass, tol=1e-16, maxiter=2)


def test_neumann_eigenvalue_on_coarse_disk_is_close():
    m = disk_mesh(2.0 ** -3)
    s = fe_system(m)
    pair = smallest_generalized_eig(s.stiffness, s.mass, deflate=np.ones(m.n_nodes))
    assert pair.value == pytest.approx(disk_neumann_mu2(), rel=5e-3)


def test_matrix_market_export_round_trip(tmp_path, small):
    import scipy.io

    k = assemble_stiffness(small)
    write_matrix_market(tmp_path / "k.mtx", k)
    back = sp.csr_matrix(scipy.io.mmread(str(tmp_path / "k.mtx")))
    assert abs(back - k).max() <= 1e-15 * abs(k).max()
    assert math.isfinite(back.sum())
