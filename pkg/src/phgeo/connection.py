"""Levi-Civita and Tanaka-Webster connections, torsion and curvature.

Index conventions (coordinates x^0..x^{n-1}):

* ``Gamma[k, i, j]``: nabla_{d_i} d_j = Gamma^k_ij d_k.
* ``R[l, k, i, j]``: the d_l component of R(d_i, d_j) d_k, with
  R(X, Y)Z = nabla_X nabla_Y Z - nabla_Y nabla_X Z - nabla_[X,Y] Z.
* ``tau[k, j]``: tau(d_j) = tau^k_j d_k, and A = tau^T g.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

from .chart import PseudoHermitianChart, vectorize
from .errors import DegeneratePlane, NotHorizontal, NotPositiveDefinite, TorsionInvalid


def _base_level(chart):
    # derived dtheta already costs one derivative of the raw fields
    return 0 if chart.dtheta_fn is not None else 1


def lc_from_metric_derivative(g, dg):
    """Christoffel symbols of the second kind from g and dg[i, j, k] = d_k g_ij."""
    ginv = jnp.linalg.inv(g)
    a = jnp.einsum("jli->ijl", dg) + jnp.einsum("ilj->ijl", dg) - dg
    return 0.5 * jnp.einsum("kl,ijl->kij", ginv, a)


def tw_from_lc(G_lc, theta, D, A, xi, tau, J):
    """Tanaka-Webster symbols from Levi-Civita ones (the LC/TW relation solved for nabla)."""
    return (
        G_lc
        + jnp.einsum("ij,k->kij", D + A, xi)
        - jnp.einsum("j,ki->kij", theta, tau)
        - jnp.einsum("i,kj->kij", theta, J)
        - jnp.einsum("j,ki->kij", theta, J)
    )


def lc_from_tw(G_tw, theta, D, A, xi, tau, J):
    """Reassemble Levi-Civita symbols from Tanaka-Webster ones.

    nabla^theta = nabla - (dtheta + A) xi + tau (x) theta + 2 theta . J
    """
    return (
        G_tw
        - jnp.einsum("ij,k->kij", D + A, xi)
        + jnp.einsum("j,ki->kij", theta, tau)
        + jnp.einsum("i,kj->kij", theta, J)
        + jnp.einsum("j,ki->kij", theta, J)
    )


def riemann_from_christoffel(G, dG):
    """R[l,k,i,j] from Gamma and dG[l, j, k, i] = d_i Gamma^l_jk."""
    return (
        jnp.einsum("ljki->lkij", dG)
        - jnp.einsum("likj->lkij", dG)
        + jnp.einsum("lim,mjk->lkij", G, G)
        - jnp.einsum("ljm,mik->lkij", G, G)
    )


class TWConnection:
    """Tanaka-Webster connection of a chart.

    For charts without a ``tau`` field the structure is taken to be Sasakian
    (tau = 0).  A user-supplied tau is validated against the identities a
    pseudo-Hermitian torsion must satisfy before anything else is computed.
    """

    def __init__(self, chart: PseudoHermitianChart, validate_tau: bool = True):
        self.chart = chart
        self.structure = chart.structure
        self.n = chart.dim
        self.tau_mode = chart.tau_mode
        lvl = _base_level(chart)
        self._lvl_metric = lvl + 1
        self._lvl_curv = lvl + 2
        self.christoffel_lc = vectorize(self.lc_fn)
        self.christoffel_tw = vectorize(self.gamma_fn)
        self.tau = vectorize(self.tau_fn)
        self.A = vectorize(self.A_fn)
        self.riemann = vectorize(self.riemann_fn)
        self.point_data = vectorize(self.point_fn)
        self._calibrated = None
        if validate_tau and self.tau_mode == "user_supplied":
            self._validate_tau()

    # -- traceable fields ---------------------------------------------------

    def tau_fn(self, x):
        if self.chart.tau is None:
            return jnp.zeros((self.n, self.n), dtype=x.dtype)
        return self.chart.tau(x)

    def A_fn(self, x):
        return self.tau_fn(x).T @ self.structure.g_fn(x)

    def lc_fn(self, x):
        g = self.structure.g_fn(x)
        dg = self.chart.derivative(self.structure.g_fn, self._lvl_metric)(x)
        return lc_from_metric_derivative(g, dg)

    def gamma_fn(self, x):
        f = self.structure.fields_fn(x)
        tau = self.tau_fn(x)
        A = tau.T @ f["g"]
        return tw_from_lc(self.lc_fn(x), f["theta"], f["dtheta"], A, f["xi"], tau, f["J"])

    def riemann_fn(self, x):
        G = self.gamma_fn(x)
        dG = self.chart.derivative(self.gamma_fn, self._lvl_curv)(x)
        return riemann_from_christoffel(G, dG)

    def torsion_fn(self, x):
        G = self.gamma_fn(x)
        return G - jnp.swapaxes(G, 1, 2)

    def point_fn(self, x):
        """Everything the integrators need at one point."""
        f = self.structure.fields_fn(x)
        f = dict(f)
        f["tau"] = self.tau_fn(x)
        f["gamma"] = self.gamma_fn(x)
        return f

    def nabla_tau_fn(self, x):
        """(nabla_{d_i} tau)^k_j as array [i, k, j]."""
        G = self.gamma_fn(x)
        tau = self.tau_fn(x)
        dtau = self.chart.derivative(self.tau_fn, 1)(x)  # [k, j, i]
        return (
            jnp.einsum("kji->ikj", dtau)
            + jnp.einsum("kil,lj->ikj", G, tau)
            - jnp.einsum("kl,lij->ikj", tau, G)
        )

    # -- derived residuals --------------------------------------------------

    def axiom_fn(self, x):
        """Pointwise residuals of the defining properties of nabla."""
        ch = self.chart
        st = self.structure
        f = st.fields_fn(x)
        th, D, J, xi, g, pi = f["theta"], f["dtheta"], f["J"], f["xi"], f["g"], f["pi_H"]
        G = self.gamma_fn(x)
        tau = self.tau_fn(x)
        lvl = self._lvl_metric
        dg = ch.derivative(st.g_fn, lvl)(x)  # [i, j, k]
        dJ = ch.derivative(ch.J_full, 1)(x)  # [a, b, k]
        dxi = ch.derivative(st.xi_fn, lvl)(x)  # [a, k]
        dth = ch.derivative(ch.theta, 1)(x)  # [j, k]
        # (nabla_k g)_ij
        ng = jnp.einsum("ijk->kij", dg) - jnp.einsum("lki,lj->kij", G, g) - jnp.einsum("lkj,il->kij", G, g)
        # (nabla_k J)^a_b
        nJ = jnp.einsum("abk->kab", dJ) + jnp.einsum("akl,lb->kab", G, J) - jnp.einsum("al,lkb->kab", J, G)
        # (nabla_k xi)^a
        nxi = dxi.T + jnp.einsum("akl,l->ka", G, xi)
        # (nabla_k theta)_j
        nth = dth.T - jnp.einsum("lkj,l->kj", G, th)
        T = G - jnp.swapaxes(G, 1, 2)
        T_formula = (
            2.0 * jnp.einsum("ij,k->kij", D, xi)
            + jnp.einsum("i,kj->kij", th, tau)
            - jnp.einsum("j,ki->kij", th, tau)
        )
        # horizontal-horizontal torsion must be 2 dtheta(X, Y) xi
        T_HH = jnp.einsum("kij,ia,jb->kab", T, pi, pi) - 2.0 * jnp.einsum("ij,ia,jb,k->kab", D, pi, pi, xi)
        scale = 1.0 + jnp.max(jnp.abs(g)) * (1.0 + jnp.max(jnp.abs(G)))
        A = tau.T @ g
        ginv = jnp.linalg.inv(g)
        return dict(
            nabla_g=jnp.max(jnp.abs(ng)) / scale,
            nabla_J=jnp.max(jnp.abs(nJ)) / scale,
            nabla_xi=jnp.max(jnp.abs(nxi)) / scale,
            horizontality=jnp.max(jnp.abs(nth)) / scale,
            torsion_formula=jnp.max(jnp.abs(T - T_formula)) / scale,
            torsion_HH=jnp.max(jnp.abs(T_HH)) / scale,
            tau_xi=jnp.max(jnp.abs(tau @ xi)),
            tau_purity=jnp.max(jnp.abs((tau @ J + J @ tau) @ pi)),
            A_symmetry=jnp.max(jnp.abs(A - A.T)),
            A_trace=jnp.abs(jnp.trace(ginv @ A)),
        )

    @cached_property
    def axioms(self):
        return vectorize(self.axiom_fn)

    def axiom_residuals(self, samples=1000, seed=0, points=None):
        pts = self.chart.sample_points(samples, seed=seed) if points is None else np.asarray(points)
        out = self.axioms(pts)
        return {k: float(np.max(v)) for k, v in out.items()}

    def _validate_tau(self, samples=16, tol=1e-8):
        pts = self.chart.sample_points(samples, seed=12345)
        res = self.axioms(pts)
        bad = {k: float(np.max(res[k])) for k in ("tau_xi", "tau_purity", "A_symmetry", "A_trace")}
        failed = {k: v for k, v in bad.items() if not v < tol}
        if failed:
            raise TorsionInvalid(f"pseudo-Hermitian torsion violates its identities: {failed}")

    # -- calibration --------------------------------------------------------

    def nested_curvature_fn(self, x, coeffs):
        """R(X,Y)Z at x from nested covariant derivatives of polynomial fields.

        ``coeffs`` has shape (3, n, 1 + n + n) holding constant, linear and
        quadratic-diagonal coefficients of the fields X, Y, Z.
        """

        def field(c):
            return lambda y: c[:, 0] + c[:, 1 : 1 + self.n] @ y + c[:, 1 + self.n :] @ (y * y)

        X, Y, Z = (field(c) for c in coeffs)

        def cov(U, W):
            # (nabla_U W)(y)
            def out(y):
                _, dW = jax.jvp(W, (y,), (U(y),))
                return dW + jnp.einsum("kij,i,j->k", self.gamma_fn(y), U(y), W(y))

            return out

        def bracket(U, W):
            def out(y):
                return jax.jvp(W, (y,), (U(y),))[1] - jax.jvp(U, (y,), (W(y),))[1]

            return out

        lhs = cov(X, cov(Y, Z))(x) - cov(Y, cov(X, Z))(x) - cov(bracket(X, Y), Z)(x)
        R = self.riemann_fn(x)
        rhs = jnp.einsum("lkij,i,j,k->l", R, X(x), Y(x), Z(x))
        return lhs, rhs

    def calibrate(self, p=None, seed=0):
        """Compare the index formula for R with the defining commutator.

        Returns (sign, residual_plus, residual_minus); the sign is +1 when
        the coordinate formula reproduces the commutator.
        """
        if self._calibrated is not None:
            return self._calibrated
        if p is None:
            lo, hi = self.chart.sample_box if self.chart.sample_box is not None else self.chart.domain
            p = lo + (hi - lo) * 0.37
        rng = np.random.default_rng(seed)
        coeffs = rng.standard_normal((3, self.n, 1 + 2 * self.n)) * 0.5
        lhs, rhs = jax.jit(self.nested_curvature_fn)(jnp.asarray(p, dtype=float), jnp.asarray(coeffs))
        lhs, rhs = np.asarray(lhs), np.asarray(rhs)
        scale = 1.0 + np.max(np.abs(lhs))
        rp = float(np.max(np.abs(lhs - rhs)) / scale)
        rm = float(np.max(np.abs(lhs + rhs)) / scale)
        sign = 1 if rp <= rm else -1
        self._calibrated = (sign, rp, rm)
        return self._calibrated


_connections: dict = {}


def connection_for(chart: PseudoHermitianChart) -> TWConnection:
    """Shared (cached) connection object for a chart."""
    conn = _connections.get(chart)
    if conn is None:
        conn = _connections[chart] = TWConnection(chart)
    return conn


def _as_connection(obj) -> TWConnection:
    if isinstance(obj, TWConnection):
        return obj
    return connection_for(obj)


def levi_civita_christoffels(chart, p) -> np.ndarray:
    """Christoffel symbols Gamma^k_ij of the Webster metric at p."""
    conn = _as_connection(chart)
    p = conn.chart.check_point(p)
    g = conn.structure.g_theta(p)
    if np.linalg.eigvalsh(g)[0] <= 0:
        raise NotPositiveDefinite(f"Webster metric not positive definite at {p.tolist()}")
    return conn.christoffel_lc(p)


def tw_connection_coeffs(chart, tau_field=None, p=None, tol=1e-7) -> np.ndarray:
    """Tanaka-Webster symbols at p, with nabla g = nabla J = nabla xi = 0 checked there.

    ``tau_field`` overrides the chart's torsion (None keeps the chart's own).
    """
    if isinstance(chart, TWConnection):
        conn = chart
    elif tau_field is not None and tau_field is not getattr(chart, "tau", None):
        conn = TWConnection(dataclasses.replace(chart, tau=tau_field))
    else:
        conn = connection_for(chart)
    p = conn.chart.check_point(p)
    res = conn.axioms(p)
    fd = conn.chart.derivative_mode != "analytic"
    lim = tol * (1e3 if fd else 1.0)
    for key in ("nabla_g", "nabla_J", "nabla_xi"):
        if not float(res[key]) < lim:
            raise TorsionInvalid(f"{key} residual {float(res[key]):.2e} at {p.tolist()}")
    return conn.christoffel_tw(p)


def torsion_tensor(conn, p, X, Y) -> np.ndarray:
    """T(X, Y) = 2 (theta ^ tau)(X, Y) + 2 dtheta(X, Y) xi."""
    conn = _as_connection(conn)
    f = conn.point_data(np.asarray(p, dtype=float))
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    th, tau = f["theta"], f["tau"]
    return (th @ X) * (tau @ Y) - (th @ Y) * (tau @ X) + 2.0 * (X @ f["dtheta"] @ Y) * f["xi"]


@dataclass
class CurvatureAtPoint:
    """Curvature tensor R[l, k, i, j] at a point, with the metric for lowering."""

    R: np.ndarray
    point: np.ndarray
    g: np.ndarray

    def apply(self, X, Y, Z):
        """R(X, Y) Z."""
        return np.einsum("lkij,i,j,k->l", self.R, X, Y, Z)

    def inner(self, X, Y, Z, W):
        """<R(X, Y) Z, W>."""
        return float(self.apply(X, Y, Z) @ self.g @ W)

    def lowered(self):
        """R_{wkij} = <R(d_i, d_j) d_k, d_w>."""
        return np.einsum("lkij,lw->wkij", self.R, self.g)


def curvature_tensor(conn, p) -> CurvatureAtPoint:
    conn = _as_connection(conn)
    sign, _, _ = conn.calibrate()
    p = np.asarray(p, dtype=float)
    R = conn.riemann(p) * sign
    return CurvatureAtPoint(R=R, point=p, g=conn.structure.g_theta(p))


def horizontal_sectional_curvature(conn, p, X, Y) -> float:
    """K^H of span{X, Y}, read as <R(X,Y)Y, X> / |X ^ Y|^2."""
    conn = _as_connection(conn)
    p = np.asarray(p, dtype=float)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    f = conn.point_data(p)
    th = f["theta"]
    for v, nm in ((X, "X"), (Y, "Y")):
        if abs(th @ v) > 1e-9 * max(1.0, np.linalg.norm(v)):
            raise NotHorizontal(f"{nm} has theta-component {th @ v:.3e}")
    g = f["g"]
    area = (X @ g @ X) * (Y @ g @ Y) - (X @ g @ Y) ** 2
    if area < 1e-24:
        raise DegeneratePlane("vectors do not span a 2-plane")
    c = curvature_tensor(conn, p)
    return c.inner(X, Y, Y, X) / area


def orthonormal_frame(g, xi):
    """Gram-Schmidt of (xi, d_0, ..., d_{n-1}) in the metric g; columns are the frame."""
    n = g.shape[0]
    basis = []
    for v in [np.asarray(xi, dtype=float)] + list(np.eye(n)):
        w = v.copy()
        for e in basis:
            w = w - (e @ g @ w) * e
        nrm = np.sqrt(max(w @ g @ w, 0.0))
        if nrm > 1e-8 * max(1.0, np.sqrt(abs(v @ g @ v))):
            basis.append(w / nrm)
        if len(basis) == n:
            break
    return np.stack(basis, axis=1)


def ricci(conn, p, Y, Z) -> float:
    """Ric(Y, Z) = trace{X -> R(X, Z) Y} via a g-orthonormal frame."""
    conn = _as_connection(conn)
    c = curvature_tensor(conn, p)
    f = conn.point_data(np.asarray(p, dtype=float))
    E = orthonormal_frame(f["g"], f["xi"])
    Y = np.asarray(Y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    return float(sum(c.inner(E[:, a], Z, Y, E[:, a]) for a in range(E.shape[1])))


def solve_connection_from_axioms(conn, p) -> np.ndarray:
    """Metric connection with the prescribed pseudo-Hermitian torsion, by linear solve.

    Finds Gamma from nabla g = 0 and Gamma^k_ij - Gamma^k_ji = T^k_ij with
    T(X,Y) = 2 dtheta(X,Y) xi + theta(X) tau Y - theta(Y) tau X.  This never
    touches the LC/TW relation, so it is an independent route to nabla.
    """
    conn = _as_connection(conn)
    p = np.asarray(p, dtype=float)
    n = conn.n
    f = conn.point_data(p)
    g, D, xi, th, tau = f["g"], f["dtheta"], f["xi"], f["theta"], f["tau"]
    dg_fn = conn.__dict__.get("_dg_jit")
    if dg_fn is None:
        dg_fn = conn._dg_jit = jax.jit(conn.chart.derivative(conn.structure.g_fn, conn._lvl_metric))
    dg = np.asarray(dg_fn(jnp.asarray(p)))
    T = 2.0 * np.einsum("ij,k->kij", D, xi) + np.einsum("i,kj->kij", th, tau) - np.einsum("j,ki->kij", th, tau)

    def idx(k, i, j):
        return (k * n + i) * n + j

    rows, rhs = [], []
    for k in range(n):
        for i in range(n):
            for j in range(i, n):
                r = np.zeros(n**3)
                for l in range(n):
                    r[idx(l, k, i)] += g[l, j]
                    r[idx(l, k, j)] += g[i, l]
                rows.append(r)
                rhs.append(dg[i, j, k])
    for k in range(n):
        for i in range(n):
            for j in range(i + 1, n):
                r = np.zeros(n**3)
                r[idx(k, i, j)] = 1.0
                r[idx(k, j, i)] = -1.0
                rows.append(r)
                rhs.append(T[k, i, j])
    M = np.array(rows)
    sol = np.linalg.solve(M, np.array(rhs))
    return sol.reshape(n, n, n)


def reassembled_levi_civita(conn, p, gamma_tw=None) -> np.ndarray:
    """Levi-Civita symbols rebuilt from Tanaka-Webster ones through the LC/TW relation."""
    conn = _as_connection(conn)
    p = np.asarray(p, dtype=float)
    f = conn.point_data(p)
    G = f["gamma"] if gamma_tw is None else gamma_tw
    A = f["tau"].T @ f["g"]
    return np.asarray(lc_from_tw(G, f["theta"], f["dtheta"], A, f["xi"], f["tau"], f["J"]))
