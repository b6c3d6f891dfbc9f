import numpy as np
import pytest

from phgeo.builtins import heisenberg_frame
from phgeo.errors import ConjugatePointPresent, NotHorizontal
from phgeo.geodesics import integrate_geodesic
from phgeo.variational import (
    INDEX_STEP,
    NO_CONJUGATE_EXPECTED,
    bonnet_myers_experiment,
    cartan_hadamard_sweep,
    comparison_basis,
    index_comparison,
    index_form,
    index_identity,
    quasi_random_directions,
    solve_comparison_equation,
)

from conftest import horizontal_pair


def heis_vector(p, a, b, c):
    return heisenberg_frame(1, p) @ np.array([a, b, c], dtype=float)


@pytest.fixture(scope="module")
def heis_path(conn_h1):
    p = np.array([0.2, -0.3, 0.1])
    return integrate_geodesic(conn_h1, p, heis_vector(p, 0.6, 0.0, 0.8), 2.0, h=INDEX_STEP)


@pytest.fixture(scope="module")
def sphere_horizontal(conn_s3):
    p = np.array([0.1, -0.2, 0.15])
    v, _ = horizontal_pair(conn_s3, p, np.random.default_rng(0))
    return integrate_geodesic(conn_s3, p, v, 1.2, h=INDEX_STEP)


def test_index_form_sine_field_heisenberg(conn_h1, heis_path):
    l = heis_path.t[-1]
    Y = heis_path.transport(heis_vector(heis_path.p, 0.0, 1.0, 0.0))  # unit, orthogonal to g'
    s = np.sin(np.pi * heis_path.t / l)[:, None]
    ds = (np.pi / l) * np.cos(np.pi * heis_path.t / l)[:, None]
    val = index_form(conn_h1, heis_path, s * Y, ds * Y).value
    assert abs(val - np.pi**2 / (2 * l)) < 1e-9


def test_index_form_trivial_fields(conn_s3, sphere_horizontal):
    path = sphere_horizontal
    zero = np.zeros_like(path.x)
    assert index_form(conn_s3, path, zero, zero).value == 0.0
    radial = index_form(conn_s3, path, path.t[:, None] * path.u, path.u).value
    assert abs(radial - path.t[-1]) < 1e-10


def test_index_form_sphere_closed_form(conn_s3, sphere_horizontal):
    """X = sin(pi t / l) J g' on a horizontal geodesic: I = (l/2)((pi/l)^2 - K) with K = 4."""
    path = sphere_horizontal
    l = path.t[-1]
    Ju = np.einsum("tij,tj->ti", path.J, path.u)
    s = np.sin(np.pi * path.t / l)[:, None]
    ds = (np.pi / l) * np.cos(np.pi * path.t / l)[:, None]
    ev = index_form(conn_s3, path, s * Ju, ds * Ju)
    assert abs(ev.value - 0.5 * l * ((np.pi / l) ** 2 - 4.0)) < 1e-7
    assert ev.error_estimate < 1e-7 * (1 + abs(ev.value))


def test_index_form_corner_field(conn_h1, heis_path):
    path = heis_path
    l = path.t[-1]
    j = 4 * 100
    tc = path.t[j]
    E = path.transport(heis_vector(path.p, 0.0, 1.0, 0.0))
    phi = np.where(path.t <= tc, path.t / tc, (l - path.t) / (l - tc))
    X = phi[:, None] * E
    dX = [E[: j + 1] / tc, -E[j:] / (l - tc)]
    val = index_form(conn_h1, path, X, dX, breakpoints=(j,)).value
    assert abs(val - (1 / tc + 1 / (l - tc))) < 1e-10


def test_comparison_equation_simple_solutions(conn_s3, sphere_horizontal):
    path = sphere_horizontal
    z = np.zeros(3)
    rad = solve_comparison_equation(conn_s3, path, z, path.u[0])
    assert np.max(np.abs(rad.V - path.t[:, None] * path.u)) < 1e-8
    vert = solve_comparison_equation(conn_s3, path, z, path.xi[0])
    assert np.max(np.abs(vert.V - path.t[:, None] * path.xi)) < 1e-8


def test_comparison_equation_is_affine_on_heisenberg(conn_h1, heis_path):
    rng = np.random.default_rng(1)
    Z0, Z1 = rng.standard_normal((2, 3))
    sol = solve_comparison_equation(conn_h1, heis_path, Z0, Z1)
    expected = heis_path.transport(Z0) + heis_path.t[:, None] * heis_path.transport(Z1)
    assert np.max(np.abs(sol.V - expected)) < 1e-9


def test_index_of_comparison_solution_is_boundary_term(conn_s3, sphere_horizontal):
    """For nabla^2 Y = R(g', Y) g' with Y(0) = 0, integration by parts gives I(Y) = <Y, Y'>(l)."""
    path = sphere_horizontal
    rng = np.random.default_rng(2)
    sol = solve_comparison_equation(conn_s3, path, np.zeros(3), rng.standard_normal(3))
    I = index_form(conn_s3, path, sol.V, sol.P).value
    assert abs(I - sol.V[-1] @ path.g[-1] @ sol.P[-1]) < 1e-9 * max(1, abs(I))


def test_basis_reciprocity_and_independence(conn_s3, sphere_horizontal):
    basis = comparison_basis(conn_s3, sphere_horizontal)
    assert basis.reciprocity() < 1e-7
    assert basis.comparison_residual < 1e-7
    assert np.min(basis.independence_profile()) > 1e-3


def test_index_identity_on_random_fields(conn_s3, sphere_horizontal):
    path = sphere_horizontal
    basis = comparison_basis(conn_s3, path)
    rng = np.random.default_rng(3)
    l = path.t[-1]
    for _ in range(3):
        C = rng.standard_normal((3, 3))
        s = np.stack([np.sin(k * np.pi * path.t / (2 * l)) for k in (1, 2, 3)], axis=1)
        ds = np.stack([k * np.pi / (2 * l) * np.cos(k * np.pi * path.t / (2 * l)) for k in (1, 2, 3)], axis=1)
        X = np.einsum("tia,ta->ti", path.E, s @ C)
        dX = np.einsum("tia,ta->ti", path.E, ds @ C)
        I = index_form(conn_s3, path, X, dX).value
        assert abs(index_identity(basis, X, dX) - I) < 1e-6 * max(1, abs(I))


def test_index_comparison_strict_heisenberg(conn_h1):
    p = np.zeros(3)
    path = integrate_geodesic(conn_h1, p, heis_vector(p, 1.0, 0.0, 0.0), 2.0, h=INDEX_STEP)
    rep = index_comparison(conn_h1, path, 0.8 * 2.0 * path.u[-1], trials=24, seed=4)
    assert rep.min_gap >= -1e-7
    assert rep.equality_violations == 0
    assert rep.identity_residual < 1e-6
    assert rep.reciprocity < 1e-7
    assert rep.horizontal_residual < 1e-6
    assert abs(rep.I_Y - 0.64 * 2.0) < 1e-8  # Y = 0.8 t g', so I(Y) = 0.64 l


def test_index_comparison_zero_target_sphere(conn_s3, sphere_horizontal):
    rep = index_comparison(conn_s3, sphere_horizontal, None, trials=24, seed=5)
    assert rep.I_Y == 0.0
    assert rep.min_gap >= -1e-7
    assert rep.equality_violations == 0
    assert rep.identity_residual < 1e-6


def test_index_comparison_rejects_non_horizontal_target(conn_h1, heis_path):
    with pytest.raises(NotHorizontal):
        index_comparison(conn_h1, heis_path, heis_path.xi[-1], trials=2, mode="strict")
    rep = index_comparison(conn_h1, heis_path, heis_path.xi[-1], trials=8, mode="remark")
    assert rep.min_gap >= -1e-7


def test_index_comparison_detects_conjugate_point(conn_s3):
    p = np.array([0.1, -0.2, 0.15])
    v, _ = horizontal_pair(conn_s3, p, np.random.default_rng(0))
    path = integrate_geodesic(conn_s3, p, v, 2.0, h=1e-2)
    with pytest.raises(ConjugatePointPresent):
        index_comparison(conn_s3, path, None, trials=2)


def test_bonnet_myers_small_table(conn_s3):
    out = bonnet_myers_experiment(conn_s3, slants=(0.0, 0.5, 1.0), curvature_samples=50)
    rows = {r["slant"]: r for r in out["rows"]}
    assert rows[1.0]["status"] == NO_CONJUGATE_EXPECTED
    assert out["monotone"] and out["passed"]
    assert abs(rows[0.0]["t_star"] - np.pi / 2) < 1e-6
    assert rows[0.5]["t_star"] > rows[0.0]["t_star"]
    assert abs(out["k0"] - 4.0) < 1e-5


def test_cartan_hadamard_sweep_and_guard(conn_h2, conn_s3):
    flat = cartan_hadamard_sweep(conn_h2, directions=8, L_max=20.0)
    assert flat["count"] == 0 and flat["partial"] == 0 and flat["min_sigma_ratio"] > 0
    sphere = cartan_hadamard_sweep(conn_s3, directions=4, L_max=4.0)
    assert sphere["count"] > 0


def test_quasi_random_directions_are_unit(conn_s3):
    p = np.array([0.3, 0.1, -0.2])
    V = quasi_random_directions(conn_s3, p, 16)
    g = conn_s3.structure.g_theta(p)
    np.testing.assert_allclose(np.einsum("bi,ij,bj->b", V, g, V), 1.0, atol=1e-12)
