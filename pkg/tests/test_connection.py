import dataclasses

import jax.numpy as jnp
import numpy as np
import pytest
import sympy as sp

from phgeo import (
    TWConnection,
    curvature_tensor,
    horizontal_sectional_curvature,
    levi_civita_christoffels,
    ricci,
    torsion_tensor,
    tw_connection_coeffs,
)
from phgeo.builtins import heisenberg_frame
from phgeo.connection import (
    lc_from_metric_derivative,
    reassembled_levi_civita,
    solve_connection_from_axioms,
)
from phgeo.errors import DegeneratePlane, NotHorizontal, TorsionInvalid
from phgeo.variational import measure_horizontal_curvature

from conftest import horizontal_pair, unit


def _sympy_heisenberg_lc():
    x, y, t = sp.symbols("x y t")
    X = [x, y, t]
    th = sp.Matrix([-y, x, 1])
    g = sp.diag(1, 1, 0) + th * th.T
    ginv = g.inv()
    G = [[[sp.simplify(sum(ginv[k, l] * (sp.diff(g[j, l], X[i]) + sp.diff(g[i, l], X[j]) - sp.diff(g[i, j], X[l]))
                           for l in range(3)) / 2) for j in range(3)] for i in range(3)] for k in range(3)]
    return sp.lambdify(X, G, "numpy")


def test_levi_civita_matches_symbolic_oracle(h1):
    oracle = _sympy_heisenberg_lc()
    for p in h1.sample_points(20, seed=1):
        np.testing.assert_allclose(levi_civita_christoffels(h1, p), np.array(oracle(*p), dtype=float), atol=1e-12)


def test_constant_metric_has_no_christoffels():
    G = lc_from_metric_derivative(jnp.eye(3), jnp.zeros((3, 3, 3)))
    assert np.all(np.asarray(G) == 0)


def test_levi_civita_is_symmetric(s3):
    for p in s3.sample_points(5, seed=2):
        G = levi_civita_christoffels(s3, p)
        assert np.max(np.abs(G - np.swapaxes(G, 1, 2))) < 1e-14


def test_heisenberg_frame_is_parallel(conn_h1):
    """nabla_{d_i} E_a = d_i E_a + Gamma^k_ij E_a^j vanishes for the left-invariant frame."""
    for p in conn_h1.chart.sample_points(10, seed=3):
        G = tw_connection_coeffs(conn_h1, p=p)
        E = heisenberg_frame(1, p)
        dE = np.zeros((3, 3, 3))  # dE[i, :, a] = d_i E_a
        dE[0, 2, 1] = -1.0  # Y_1 = d_y - x d_t
        dE[1, 2, 0] = 1.0  # X_1 = d_x + y d_t
        cov = dE + np.einsum("kij,ja->ika", G, E)
        assert np.max(np.abs(cov)) < 1e-12


@pytest.mark.parametrize("name", ["conn_h1", "conn_h2", "conn_s3"])
def test_connection_axioms(name, request):
    conn = request.getfixturevalue(name)
    res = conn.axiom_residuals(samples=200, seed=4)
    for key in ("nabla_g", "nabla_J", "nabla_xi", "horizontality", "torsion_formula", "torsion_HH"):
        assert res[key] < 1e-10, (key, res[key])


def test_heisenberg_torsion_table(conn_h1, h1):
    T = torsion_tensor(conn_h1, [0, 0, 0], [1, 0, 0], [0, 1, 0])
    np.testing.assert_allclose(T, h1.ledger["hand_table"]["torsion_X1_Y1"], atol=1e-14)


def test_torsion_from_christoffels_matches_formula(conn_s3):
    rng = np.random.default_rng(5)
    for p in conn_s3.chart.sample_points(10, seed=5):
        G = tw_connection_coeffs(conn_s3, p=p)
        X, Y = rng.standard_normal((2, 3))
        T_G = np.einsum("kij,i,j->k", G - np.swapaxes(G, 1, 2), X, Y)
        np.testing.assert_allclose(T_G, torsion_tensor(conn_s3, p, X, Y), atol=1e-10)


def test_torsion_with_reeb_vanishes_and_is_antisymmetric(conn_s3):
    rng = np.random.default_rng(6)
    p = np.array([0.2, -0.5, 0.3])
    xi = conn_s3.structure.xi(p)
    X, Y = rng.standard_normal((2, 3))
    assert np.linalg.norm(torsion_tensor(conn_s3, p, xi, Y)) < 1e-12
    assert np.array_equal(torsion_tensor(conn_s3, p, X, Y), -torsion_tensor(conn_s3, p, Y, X))


@pytest.mark.parametrize("name", ["conn_h1", "conn_s3"])
def test_axiom_solve_agrees_with_formula(name, request):
    conn = request.getfixturevalue(name)
    for p in conn.chart.sample_points(5, seed=7):
        np.testing.assert_allclose(solve_connection_from_axioms(conn, p), conn.christoffel_tw(p), atol=1e-9)


@pytest.mark.parametrize("name", ["conn_h2", "conn_s3"])
def test_lc_reassembly(name, request):
    conn = request.getfixturevalue(name)
    for p in conn.chart.sample_points(5, seed=8):
        np.testing.assert_allclose(reassembled_levi_civita(conn, p), conn.christoffel_lc(p), atol=1e-10)


@pytest.mark.parametrize("name", ["conn_h1", "conn_s3"])
def test_curvature_sign_calibration_is_decisive(name, request):
    sign, r_plus, r_minus = request.getfixturevalue(name).calibrate()
    assert min(r_plus, r_minus) < 1e-10
    if name == "conn_s3":
        assert max(r_plus, r_minus) > 1e-3


@pytest.mark.parametrize("name", ["conn_h1", "conn_h2"])
def test_heisenberg_is_flat(name, request):
    conn = request.getfixturevalue(name)
    R = conn.riemann(conn.chart.sample_points(1000, seed=9))
    assert np.max(np.abs(R)) < 1e-10


def test_sphere_curvature_symmetries(conn_s3):
    rng = np.random.default_rng(10)
    for p in conn_s3.chart.sample_points(10, seed=10):
        c = curvature_tensor(conn_s3, p)
        X, Y, Z, W = rng.standard_normal((4, 3))
        xi = conn_s3.structure.xi(p)
        assert abs(c.inner(X, Y, Z, W) + c.inner(Y, X, Z, W)) < 1e-9
        assert abs(c.inner(X, Y, Z, W) + c.inner(X, Y, W, Z)) < 1e-9
        assert abs(c.inner(X, Y, Z, W) - c.inner(Z, W, X, Y)) < 1e-9
        assert abs(c.inner(xi, Y, Z, W)) < 1e-9
        assert abs(c.inner(Z, W, xi, Y)) < 1e-9


def test_sphere_horizontal_curvature_is_constant(conn_s3):
    meas = measure_horizontal_curvature(conn_s3, samples=200, seed=11)
    assert meas["K_max"] - meas["K_min"] < 1e-6
    assert meas["K_min"] > 0
    assert abs(meas["K_min"] - 4.0) < 1e-6  # value under the half-dtheta convention


def test_horizontal_curvature_basis_invariance(conn_s3):
    rng = np.random.default_rng(12)
    p = np.array([0.3, 0.1, -0.6])
    X, Y = horizontal_pair(conn_s3, p, rng)
    k = horizontal_sectional_curvature(conn_s3, p, X, Y)
    k2 = horizontal_sectional_curvature(conn_s3, p, 2 * X, X + 3 * Y)
    assert abs(k - k2) < 1e-9 * abs(k)


def test_horizontal_curvature_heisenberg_zero(conn_h1):
    assert abs(horizontal_sectional_curvature(conn_h1, [0, 0, 0], [1, 0, 0], [0, 1, 0])) < 1e-14


def test_horizontal_curvature_errors(conn_s3):
    p = np.array([0.3, 0.1, -0.6])
    X, _ = horizontal_pair(conn_s3, p, np.random.default_rng(0))
    with pytest.raises(DegeneratePlane):
        horizontal_sectional_curvature(conn_s3, p, X, 2 * X)
    with pytest.raises(NotHorizontal):
        horizontal_sectional_curvature(conn_s3, p, X, conn_s3.structure.xi(p))


def test_ricci_heisenberg_zero(conn_h2):
    rng = np.random.default_rng(13)
    for p in conn_h2.chart.sample_points(5, seed=13):
        assert abs(ricci(conn_h2, p, *rng.standard_normal((2, 5)))) < 1e-12


def test_sphere_ricci_constant_and_direct_sum(conn_s3):
    rng = np.random.default_rng(14)
    vals = []
    for p in conn_s3.chart.sample_points(10, seed=14):
        Y, _ = horizontal_pair(conn_s3, p, rng)
        vals.append(ricci(conn_s3, p, Y, Y))
        # direct sum over an orthonormal basis built independently (xi, Y, JY)
        f = conn_s3.point_data(p)
        basis = [f["xi"], Y, f["J"] @ Y]
        c = curvature_tensor(conn_s3, p)
        assert abs(vals[-1] - sum(c.inner(e, Y, Y, e) for e in basis)) < 1e-9
    assert np.ptp(vals) < 1e-6
    # the xi direction contributes nothing, so Ric(Y, Y) = K^H(Y, JY) = (2m - 1) k with m = 1
    assert abs(vals[0] - 4.0) < 1e-6


def test_ricci_bilinearity(conn_s3):
    rng = np.random.default_rng(15)
    p = np.array([0.1, 0.2, 0.3])
    Y, Z, W = rng.standard_normal((3, 3))
    lhs = ricci(conn_s3, p, 2 * Y, Z + W)
    rhs = 2 * ricci(conn_s3, p, Y, Z) + 2 * ricci(conn_s3, p, Y, W)
    assert abs(lhs - rhs) < 1e-10 * (1 + abs(lhs))


def test_invalid_user_torsion_rejected(h1):
    with pytest.raises(TorsionInvalid):
        TWConnection(dataclasses.replace(h1, tau=lambda x: jnp.eye(3)))


def test_torsion_inconsistent_with_structure_rejected(h1):
    """Algebraically admissible tau that the structure does not support fails the nabla J postcondition."""

    def tau(x):
        E = jnp.array([[1.0, 0, 0], [0, 1, 0], [x[1], -x[0], 1]])
        return E @ jnp.diag(jnp.array([1.0, -1, 0])) @ jnp.linalg.inv(E)

    with pytest.raises(TorsionInvalid):
        tw_connection_coeffs(h1, tau, p=np.array([0.1, 0.2, 0.3]))


def test_unit_helper(conn_s3):
    p = np.array([0.1, 0.2, 0.3])
    v = unit(conn_s3, p, [1.0, 2.0, 3.0])
    g = conn_s3.structure.g_theta(p)
    assert abs(v @ g @ v - 1) < 1e-14
