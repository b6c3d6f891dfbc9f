import dataclasses

import jax.numpy as jnp
import numpy as np
import pytest

from phgeo import TWConnection
from phgeo.builtins import heisenberg_frame
from phgeo.errors import GridMismatch, ModeMismatch, NotArcLength, NotHeisenberg
from phgeo.geodesics import exp_map, integrate_geodesic, integrate_geodesics
from phgeo.jacobi import (
    conjugate_search,
    decompose,
    decompose_batch,
    dexp,
    heisenberg_closed_form,
    heisenberg_coefficients,
    heisenberg_frame_along,
    integrate_jacobi,
    integrate_jacobi_fields,
    resolve_mode,
    split_integrate,
    taylor_expansion_check,
)

from conftest import horizontal_pair, unit


def heis_vector(p, *coef):
    return heisenberg_frame(len(coef) // 2, p) @ np.asarray(coef, dtype=float)


@pytest.fixture(scope="module")
def sphere_path(conn_s3):
    p = np.array([0.2, -0.1, 0.3])
    rng = np.random.default_rng(0)
    v, _ = horizontal_pair(conn_s3, p, rng)
    xi = conn_s3.structure.xi(p)
    c = 0.5
    return integrate_geodesic(conn_s3, p, c * xi + np.sqrt(1 - c * c) * v, 2.0)


def test_radial_field_is_t_gamma_dot(conn_s3, sphere_path):
    sol = integrate_jacobi(conn_s3, sphere_path, np.zeros(3), sphere_path.u[0])
    assert np.max(np.abs(sol.V - sphere_path.t[:, None] * sphere_path.u)) < 1e-8


def test_reeb_field_is_jacobi(conn_s3, sphere_path):
    sol = integrate_jacobi(conn_s3, sphere_path, sphere_path.xi[0], np.zeros(3))
    assert np.max(np.abs(sol.V - sphere_path.xi)) < 1e-8


@pytest.mark.parametrize("coef", [(0.6, 0.0, 0.8), (0.3, -0.4, 0.5), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0)])
def test_heisenberg_closed_form_oracle(conn_h1, coef):
    rng = np.random.default_rng(1)
    p = rng.uniform(-1, 1, 3)
    c = np.array(coef) / np.linalg.norm(coef)
    v = heis_vector(p, *c)
    path = integrate_geodesic(conn_h1, p, v, 5.0)
    V0, V0p = rng.standard_normal((2, 3))
    sol = integrate_jacobi(conn_h1, path, V0, V0p, mode="sasakian")
    a, b = heisenberg_coefficients(conn_h1, p, v, V0, V0p)
    exact = heisenberg_closed_form(conn_h1, p, v, a, b, path.t)
    assert np.max(np.abs(sol.V - exact)) < 1e-7


def test_heisenberg2_closed_form_oracle(conn_h2):
    rng = np.random.default_rng(2)
    p = rng.uniform(-1, 1, 5)
    c = rng.standard_normal(5)
    v = heis_vector(p, *(c / np.linalg.norm(c)))
    path = integrate_geodesic(conn_h2, p, v, 5.0)
    V0, V0p = rng.standard_normal((2, 5))
    sol = integrate_jacobi(conn_h2, path, V0, V0p)
    a, b = heisenberg_coefficients(conn_h2, p, v, V0, V0p)
    assert np.max(np.abs(sol.V - heisenberg_closed_form(conn_h2, p, v, a, b, path.t))) < 1e-7


def test_closed_form_vertical_constant_field(conn_h1):
    p = np.array([0.3, -0.2, 0.1])
    t = np.linspace(0, 3, 7)
    a = np.zeros(3)
    b = np.array([0.0, 1.0, 0.0])
    V = heisenberg_closed_form(conn_h1, p, [0, 0, 1.0], a, b, t)
    E = heisenberg_frame_along(1, p, [0, 0, 1.0])
    for k, tt in enumerate(t):
        np.testing.assert_allclose(V[k], heisenberg_frame(1, p + tt * np.array([0, 0, 1.0])) @ E[:, 1], atol=1e-14)


def test_closed_form_solves_frame_equation(conn_h1):
    """In the parallel frame: f'' = 2 <J g', f'> xi, i.e. f_0'' = 2 s a_1 and the rest affine."""
    p = np.zeros(3)
    c = np.array([0.6, 0.0, 0.8])
    v = heis_vector(p, *c)
    a = np.array([0.5, 1.5, -0.7])
    b = np.array([0.2, 0.0, 0.3])
    t = np.linspace(0, 2, 41)
    V = heisenberg_closed_form(conn_h1, p, v, a, b, t)
    E = heisenberg_frame_along(1, p, v)
    f = np.stack([np.linalg.solve(heisenberg_frame(1, p + tt * v) @ E, Vk) for tt, Vk in zip(t, V)])
    s = np.sqrt(1 - 0.8**2)
    quad = np.polyfit(t, f[:, 0], 2)
    assert abs(2 * quad[0] - 2 * s * a[1]) < 1e-9
    for i in (1, 2):
        assert np.max(np.abs(np.polyval(np.polyfit(t, f[:, i], 1), t) - f[:, i])) < 1e-9


def test_closed_form_only_on_heisenberg(conn_s3):
    with pytest.raises(NotHeisenberg):
        heisenberg_closed_form(conn_s3, np.zeros(3), [1.0, 0, 0], np.zeros(3), np.zeros(3), [0.0])


def test_general_mode_agrees_on_sasakian_chart(conn_s3, sphere_path):
    rng = np.random.default_rng(3)
    V0, V0p = rng.standard_normal((2, 3))
    a = integrate_jacobi(conn_s3, sphere_path, V0, V0p, mode="sasakian")
    b = integrate_jacobi(conn_s3, sphere_path, V0, V0p, mode="general")
    assert np.max(np.abs(a.V - b.V)) < 1e-9


def test_split_agrees_with_full_integrator(conn_s3):
    rng = np.random.default_rng(4)
    worst, affine = 0.0, 0.0
    for _ in range(10):
        p = rng.uniform(-0.5, 0.5, 3)
        v = unit(conn_s3, p, rng.standard_normal(3))
        path = integrate_geodesic(conn_s3, p, v, 1.5)
        V0, V0p = rng.standard_normal((2, 3))
        full = integrate_jacobi(conn_s3, path, V0, V0p, mode="sasakian")
        split = split_integrate(conn_s3, path, V0, V0p)
        worst = max(worst, np.max(np.abs(full.V - split.V)))
        affine = max(affine, split.extra["tangential_affine_residual"])
    assert worst < 1e-7
    assert affine < 1e-6


def test_split_vertical_geodesic_has_no_vertical_source(conn_s3):
    p = np.array([0.0, 1.0, 0.0])
    path = integrate_geodesic(conn_s3, p, conn_s3.structure.xi(p), 2.0)
    V0 = conn_s3.structure.pi_H(p) @ np.array([0.3, 0.2, -0.5])
    sol = split_integrate(conn_s3, path, V0, np.zeros(3))
    assert np.max(np.abs(sol.extra["f"])) < 1e-7


def test_modes_need_sasakian(h1):
    def tau(x):
        E = jnp.array([[1.0, 0, 0], [0, 1, 0], [x[1], -x[0], 1]])
        return E @ jnp.diag(jnp.array([1.0, -1, 0])) @ jnp.linalg.inv(E)

    conn = TWConnection(dataclasses.replace(h1, tau=tau))
    assert resolve_mode(conn, "auto") == "general"
    for mode in ("sasakian", "split"):
        with pytest.raises(ModeMismatch):
            resolve_mode(conn, mode)
    with pytest.raises(ValueError):
        resolve_mode(conn, "bogus")


def test_dexp_radial_isometry_and_small_t(conn_s3):
    p = np.array([0.1, 0.4, -0.2])
    v = unit(conn_s3, p, [1.0, 0.5, -0.3])
    for t in (0.5, 1.5):
        V = dexp(conn_s3, p, v, v, t)
        path = integrate_geodesic(conn_s3, p, v, t)
        g = conn_s3.structure.g_theta(path.x[-1])
        assert abs(np.sqrt(V @ g @ V) - t) < 1e-8
    w = np.array([0.2, -0.7, 0.4])
    # V(t)/t = w + O(t) in coordinates; one Richardson step removes the O(t) term
    t = 1e-3
    q1, q2 = dexp(conn_s3, p, v, w, t) / t, dexp(conn_s3, p, v, w, t / 2) / (t / 2)
    assert np.max(np.abs(q1 - w)) < 1e-3
    assert np.max(np.abs(2 * q2 - q1 - w)) < 1e-5


def test_variation_of_geodesics_matches_jacobi(conn_s3):
    p = np.array([0.1, 0.4, -0.2])
    v = np.array([0.4, 0.1, -0.3])
    w = np.array([0.2, -0.7, 0.4])
    t, ds = 1.0, 1e-4
    fd = (exp_map(conn_s3, p, t * (v + ds * w)) - exp_map(conn_s3, p, t * (v - ds * w))) / (2 * ds)
    assert np.max(np.abs(fd - dexp(conn_s3, p, v, t * w, t) / t * t)) < 1e-5


def test_jacobi_linearity(conn_s3, sphere_path):
    rng = np.random.default_rng(5)
    A0, A1, B0, B1 = rng.standard_normal((4, 3))
    VA = integrate_jacobi(conn_s3, sphere_path, A0, A1).V
    VB = integrate_jacobi(conn_s3, sphere_path, B0, B1).V
    VC = integrate_jacobi(conn_s3, sphere_path, 2 * A0 - B0, 2 * A1 - B1).V
    assert np.max(np.abs(VC - (2 * VA - VB))) < 1e-9


def test_jacobi_space_has_dimension_4m_plus_2(conn_s3, sphere_path):
    n = 3
    V0 = np.hstack([np.eye(n), np.zeros((n, n))])
    P0 = np.hstack([np.zeros((n, n)), np.eye(n)])
    V, P = integrate_jacobi_fields(conn_s3, sphere_path, V0, P0)
    M = np.vstack([V[5], P[5]])  # 2n x 2n at t = 0.05
    s = np.linalg.svd(M, compute_uv=False)
    assert s[-1] / s[0] > 1e-3


def test_conserved_quantity_is_constant(conn_s3, sphere_path):
    rng = np.random.default_rng(6)
    sol = integrate_jacobi(conn_s3, sphere_path, *rng.standard_normal((2, 3)))
    assert np.ptp(sol.conserved_quantity()) < 1e-6


def test_taylor_heisenberg_levi_pair(conn_h1):
    p = np.zeros(3)
    v = heis_vector(p, 1, 0, 0)
    rep = taylor_expansion_check(conn_h1, p, v, heis_vector(p, 0, 1, 0))
    assert abs(rep["fitted"]["c2"] - 1) < 1e-6
    assert abs(rep["fitted"]["c3"]) < 1e-4
    assert abs(rep["fitted"]["c4"] - 1) < 1e-3


def test_taylor_heisenberg_with_reeb_direction(conn_h1):
    p = np.zeros(3)
    v = heis_vector(p, 0.6, 0, 0.8)
    w = heis_vector(p, 0.0, 0.6, 0.8)
    w = w - (w @ v) * v
    w = w / np.linalg.norm(w)
    rep = taylor_expansion_check(conn_h1, p, v, w)
    assert abs(rep["predicted"]["c3"]) > 0.1
    for k, tol in (("c2", 1e-6), ("c3", 1e-4), ("c4", 1e-3)):
        assert rep["residuals"][k] < tol * max(1.0, abs(rep["predicted"][k])), k


def test_taylor_sphere_curvature_term(conn_s3):
    p = np.array([0.3, -0.1, 0.2])
    v, Jv = horizontal_pair(conn_s3, p, np.random.default_rng(7))
    rep = taylor_expansion_check(conn_s3, p, v, Jv)
    # c4 = <Jv, w>^2 - K/3 with the measured curvature K = 4
    assert abs(rep["predicted"]["c4"] - (1 - 4 / 3)) < 1e-6
    assert rep["residuals"]["c4"] < 1e-4 * max(1.0, abs(rep["predicted"]["c4"]))
    xi = conn_s3.structure.xi(p)
    rep = taylor_expansion_check(conn_s3, p, v, xi)
    assert rep["residuals"]["c4"] < 1e-4


def test_decompose_affine_tangent_field(conn_s3, sphere_path):
    sol = integrate_jacobi(conn_s3, sphere_path, 3 * sphere_path.u[0], 2 * sphere_path.u[0])
    dec = decompose(sol)
    assert abs(dec.a - 3) < 1e-12 and abs(dec.b - 2) < 1e-12
    assert np.max(np.abs(dec.W.V)) < 1e-9


def test_decompose_reeb_field(conn_s3, sphere_path):
    sol = integrate_jacobi(conn_s3, sphere_path, sphere_path.xi[0], np.zeros(3))
    dec = decompose(sol)
    assert abs(dec.a - sphere_path.slant) < 1e-12 and abs(dec.b) < 1e-12
    expected = sphere_path.xi - sphere_path.slant * sphere_path.u
    assert np.max(np.abs(dec.W.V - expected)) < 1e-8
    assert np.max(np.abs(sphere_path.inner(dec.W.V, sphere_path.u))) < 1e-8


def test_decompose_vertical_geodesic(conn_s3):
    rng = np.random.default_rng(8)
    p = np.array([0.0, 1.0, 0.0])
    path = integrate_geodesic(conn_s3, p, conn_s3.structure.xi(p), 2.0)
    dec = decompose(integrate_jacobi(conn_s3, path, *rng.standard_normal((2, 3))))
    assert np.max(np.abs(path.inner(dec.W.V, path.u))) < 1e-6
    assert dec.reconstruction_residual < 1e-7 and dec.integral_residual < 1e-6


def test_decompose_needs_arc_length(conn_s3):
    path = integrate_geodesic(conn_s3, np.zeros(3), [2.0, 0, 0], 0.5)
    with pytest.raises(NotArcLength):
        decompose(integrate_jacobi(conn_s3, path, np.zeros(3), [0, 1.0, 0]))


def test_decompose_batch_matches_single(conn_s3):
    rng = np.random.default_rng(9)
    P = rng.uniform(-0.4, 0.4, (3, 3))
    U = np.stack([unit(conn_s3, p, rng.standard_normal(3)) for p in P])
    paths = integrate_geodesics(conn_s3, P, U, 1.0)
    V0, V0p = rng.standard_normal((2, 3, 3))
    for path, (sol, dec), a, b in zip(paths, decompose_batch(conn_s3, paths, V0, V0p), V0, V0p):
        single = decompose(integrate_jacobi(conn_s3, path, a, b, mode="sasakian"))
        assert np.max(np.abs(sol.V - single.W.V - (single.a + single.b * path.t)[:, None] * path.u)) < 1e-8
        assert abs(dec.a - single.a) < 1e-12 and abs(dec.b - single.b) < 1e-12
    other = integrate_geodesic(conn_s3, P[0], U[0], 0.5)
    with pytest.raises(GridMismatch):
        decompose_batch(conn_s3, [paths[0], other], V0[:2], V0p[:2])


def test_no_conjugate_points_on_heisenberg(conn_h1):
    res = conjugate_search(conn_h1, np.zeros(3), heis_vector(np.zeros(3), 0.6, 0.0, 0.8), 20.0)
    assert res.points == [] and not res.partial
    assert res.min_ratio_after > 1e-4


def test_no_conjugate_points_on_vertical_sphere_geodesic(conn_s3):
    p = np.array([0.0, 1.0, 0.0])  # Hopf fibre through this point stays at |u| = 1
    res = conjugate_search(conn_s3, p, conn_s3.structure.xi(p), 20.0)
    assert res.points == [] and not res.partial


def test_sphere_horizontal_conjugate_point_and_symmetry(conn_s3):
    p = np.array([0.1, -0.2, 0.15])
    v, _ = horizontal_pair(conn_s3, p, np.random.default_rng(10))
    res = conjugate_search(conn_s3, p, v, 2.0)
    tstar = res.first
    assert tstar is not None and tstar <= np.pi / np.sqrt(4.0) + 1e-4
    assert abs(tstar - np.pi / 2) < 1e-6
    path = integrate_geodesic(conn_s3, p, v, tstar, h=tstar / 400)
    back = conjugate_search(conn_s3, path.x[-1], -path.u[-1], 2.0)
    assert abs(back.first - tstar) < 1e-6
