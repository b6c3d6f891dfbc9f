"""Reference manifolds: the Heisenberg groups H_m and the Sasakian 3-sphere.

Each registry entry carries a convention ledger: the formulas used for
theta and J, the frames they are stated in, and a small table of values
worked out by hand.  The tests compare the live charts against these tables.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .chart import PseudoHermitianChart, chart_from_json
from .errors import PhgeoError

# ---------------------------------------------------------------------------
# Heisenberg group


def _heisenberg_fields(m):
    n = 2 * m + 1

    def theta(x):
        xs, ys = x[:m], x[m : 2 * m]
        return jnp.concatenate([-ys, xs, jnp.ones(1, dtype=x.dtype)])

    def dtheta(x):
        D = jnp.zeros((n, n), dtype=x.dtype)
        idx = jnp.arange(m)
        D = D.at[idx, m + idx].set(1.0)
        return D.at[m + idx, idx].set(-1.0)

    def J_full(x):
        xs, ys = x[:m], x[m : 2 * m]
        J = jnp.zeros((n, n), dtype=x.dtype)
        idx = jnp.arange(m)
        # J X_i = Y_i with X_i = d_xi + y_i d_t, Y_i = d_yi - x_i d_t
        J = J.at[m + idx, idx].set(1.0)
        J = J.at[2 * m, idx].set(-xs)
        # J Y_i = -X_i
        J = J.at[idx, m + idx].set(-1.0)
        J = J.at[2 * m, m + idx].set(-ys)
        return J

    return theta, dtheta, J_full


def heisenberg_frame(m, p):
    """Left-invariant frame (X_1..X_m, Y_1..Y_m, xi) at p as matrix columns."""
    p = np.asarray(p, dtype=float)
    n = 2 * m + 1
    E = np.eye(n)
    for i in range(m):
        E[2 * m, i] = p[m + i]
        E[2 * m, m + i] = -p[i]
    return E


def heisenberg(m: int = 1, derivative_mode: str = "analytic", fd_step: float = 1e-5) -> PseudoHermitianChart:
    """H_m with theta = dt + sum_i (x^i dy^i - y^i dx^i)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    theta, dtheta, J = _heisenberg_fields(m)
    n = 2 * m + 1
    lo = np.array([-40.0] * (2 * m) + [-2000.0])
    ledger = {
        "name": f"heisenberg{m}",
        "coordinates": [f"x{i + 1}" for i in range(m)] + [f"y{i + 1}" for i in range(m)] + ["t"],
        "theta": "dt + sum_i (x^i dy^i - y^i dx^i)",
        "dtheta_normalisation": "dtheta(X,Y) = (X theta(Y) - Y theta(X) - theta([X,Y]))/2",
        "dtheta": "sum_i dx^i ^ dy^i",
        "frame": "X_i = d_xi + y^i d_t, Y_i = d_yi - x^i d_t, xi = d_t",
        "J": "J X_i = Y_i, J Y_i = -X_i, J xi = 0",
        "tau_mode": "sasakian_zero",
        "hand_table": _heisenberg_hand_table(m),
    }
    return PseudoHermitianChart(
        dim=n,
        domain=(lo, -lo),
        theta=theta,
        J_full=J,
        dtheta_fn=dtheta if derivative_mode == "analytic" else None,
        derivative_mode=derivative_mode,
        fd_step=fd_step,
        name=f"heisenberg{m}",
        ledger=ledger,
        sample_box=(np.full(n, -3.0), np.full(n, 3.0)),
    )


def _heisenberg_hand_table(m):
    # At x^1 = 1, y^1 = 2, t = 3 (other coordinates 0):
    # theta = -2 dx^1 + dy^1 + dt, so g = dx^2 + dy^2 + theta^2 restricted accordingly.
    n = 2 * m + 1
    p = np.zeros(n)
    p[0], p[m], p[-1] = 1.0, 2.0, 3.0
    theta = np.zeros(n)
    theta[0], theta[m], theta[-1] = -2.0, 1.0, 1.0
    g = np.eye(n)
    g[-1, -1] = 0.0
    g = g + np.outer(theta, theta)
    xi = np.zeros(n)
    xi[-1] = 1.0
    return {
        "point": p.tolist(),
        "theta": theta.tolist(),
        "xi": xi.tolist(),
        "g": g.tolist(),
        "frame_metric": np.eye(n).tolist(),
        "torsion_X1_Y1": (2.0 * xi).tolist(),
        "K_H": 0.0,
    }


# ---------------------------------------------------------------------------
# Sasakian 3-sphere


def _imul(p):
    # multiplication by i on C^2 = R^4, (a + ib, c + id)
    return jnp.stack([-p[1], p[0], -p[3], p[2]])


def sphere_embedding(u):
    """Inverse stereographic projection from (-1, 0, 0, 0): R^3 -> S^3."""
    r2 = u @ u
    return jnp.concatenate([jnp.array([1.0 - r2]), 2.0 * u]) / (1.0 + r2)


def sphere_projection(p):
    """Stereographic projection from (-1, 0, 0, 0): S^3 -> R^3."""
    p = np.asarray(p, dtype=float)
    return p[1:] / (1.0 + p[0])


def _sphere_fields():
    imat = np.array(jax.vmap(_imul)(jnp.eye(4))).T  # columns i e_k

    def theta(u):
        D = jax.jacfwd(sphere_embedding)(u)
        return D.T @ _imul(sphere_embedding(u))

    def J_full(u):
        p = sphere_embedding(u)
        D = jax.jacfwd(sphere_embedding)(u)
        lam2 = (2.0 / (1.0 + u @ u)) ** 2
        ip = _imul(p)
        P = jnp.eye(4) - jnp.outer(ip, ip)
        return D.T @ jnp.asarray(imat) @ P @ D / lam2

    return theta, J_full


SPHERE_BOX = 4.0


def sasakian_sphere3() -> PseudoHermitianChart:
    """S^3 in C^2 with theta_p(X) = <ip, X>, charted by stereographic coordinates."""
    theta, J = _sphere_fields()
    b = SPHERE_BOX
    ledger = {
        "name": "sphere3",
        "coordinates": ["u1", "u2", "u3"],
        "embedding": "p(u) = ((1 - |u|^2), 2u) / (1 + |u|^2), pole (-1,0,0,0) excluded",
        "theta": "theta_p(X) = <ip, X>, i(a,b,c,d) = (-b,a,-d,c)",
        "dtheta_normalisation": "dtheta(X,Y) = (X theta(Y) - Y theta(X) - theta([X,Y]))/2",
        "J": "J = i restricted to H = (ip)^perp, pulled back to the chart",
        "tau_mode": "sasakian_zero",
        "curvature_constant": "measured, not assumed",
        "hand_table": {
            "point": [0.0, 0.0, 0.0],
            "theta": [2.0, 0.0, 0.0],
            "xi": [0.5, 0.0, 0.0],
            "g": (4.0 * np.eye(3)).tolist(),
            "J": [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        },
    }
    return PseudoHermitianChart(
        dim=3,
        domain=(np.full(3, -b), np.full(3, b)),
        theta=theta,
        J_full=J,
        name="sphere3",
        ledger=ledger,
    )


def sphere_reeb_formula(u):
    """Reeb field pushed through the stereographic projection (independent of the solve)."""
    p = np.asarray(sphere_embedding(jnp.asarray(u, dtype=float)))
    ip = np.asarray(_imul(jnp.asarray(p)))
    # d proj_p (w) = w[1:]/(1+p0) - p[1:] w0/(1+p0)^2
    return ip[1:] / (1.0 + p[0]) - p[1:] * ip[0] / (1.0 + p[0]) ** 2


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    constructor: Callable[[], PseudoHermitianChart]
    description: str
    sasakian: bool = True


REGISTRY: dict[str, RegistryEntry] = {
    "heisenberg1": RegistryEntry("heisenberg1", lambda: heisenberg(1), "Heisenberg group H_1 (flat Sasakian)"),
    "heisenberg2": RegistryEntry("heisenberg2", lambda: heisenberg(2), "Heisenberg group H_2 (flat Sasakian)"),
    "heisenberg-m": RegistryEntry(
        "heisenberg-m", lambda: heisenberg(1), "Heisenberg group H_m, request as heisenberg-<m>"
    ),
    "sphere3": RegistryEntry("sphere3", sasakian_sphere3, "standard Sasakian S^3, stereographic chart"),
}


@lru_cache(maxsize=None)
def _cached(name):
    mt = re.fullmatch(r"heisenberg-?(\d+)", name)
    if mt:
        return heisenberg(int(mt.group(1)))
    if name in REGISTRY:
        return REGISTRY[name].constructor()
    raise PhgeoError(f"unknown manifold {name!r}; known: {sorted(REGISTRY)}")


def get_manifold(name: str) -> PseudoHermitianChart:
    """Resolve a builtin name (or ``file:path.json``) to a shared chart instance."""
    if name.startswith("file:"):
        return chart_from_json(name[5:], name=name)
    return _cached(name)
