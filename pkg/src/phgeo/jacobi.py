"""Jacobi fields along nabla-geodesics.

Fields are integrated in first-order form (V, P) with P = nabla_{gamma'} V,
jointly with the geodesic itself on the geodesic's own grid.  Modes:

``sasakian``    nabla^2 V = R(g', V) g' + 2 <J g', nabla V> xi
``general``     nabla^2 V = R(g', V) g' + nabla_{g'} T(g', V), with the
                torsion derivative expanded through tau and nabla tau
``split``       horizontal block by the comparison equation, vertical
                coefficient by quadrature of 2 <J g', nabla V_H>
``comparison``  nabla^2 Z = R(g', Z) g'
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq, minimize_scalar

from ._ode import kernel_for, run_rk4
from .connection import _as_connection, curvature_tensor, orthonormal_frame
from .errors import GridMismatch, LeftDomain, ModeMismatch, NotHeisenberg
from .geodesics import DEFAULT_STEP, GeodesicPath, _frame0, integrate_geodesic, integrate_monitored

JACOBI_TOL = 1e-7
MODES = ("auto", "general", "sasakian", "split", "comparison")


def resolve_mode(conn, mode):
    if mode not in MODES:
        raise ValueError(f"unknown Jacobi mode {mode!r}; choose from {MODES}")
    if mode == "auto":
        return "sasakian" if conn.tau_mode == "sasakian_zero" else "general"
    if mode in ("sasakian", "split", "comparison") and conn.tau_mode != "sasakian_zero":
        raise ModeMismatch(f"mode {mode!r} needs a Sasakian connection (tau = 0)")
    return mode


def jacobi_batch(conn, P, Vs, length, V0, P0, mode="auto", h=DEFAULT_STEP, tol=JACOBI_TOL,
                 monitor=True, allow_exit=False):
    """Integrate k fields along each of B geodesics.

    P, Vs: (B, n); V0, P0: (B, n, k).  Returns dict with t (B, N+1), x, u,
    V, P (B, N+1, n[, k]), exit index per geodesic and the step used.
    ``mode`` here is one of the ODE modes (split is handled by callers).
    """
    conn = _as_connection(conn)
    mode = resolve_mode(conn, mode)
    ode_mode = "comparison" if mode == "split" else mode
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Vs = np.atleast_2d(np.asarray(Vs, dtype=float))
    V0 = np.asarray(V0, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    B = len(P)
    lengths = np.broadcast_to(np.asarray(length, dtype=float), (B,))
    y0 = {"x": P, "u": Vs, "V": V0, "P": P0}
    smp, ex, hs, nsteps, err = integrate_monitored(conn, ("jacobi", ode_mode), y0, lengths, h, tol, monitor)
    if not allow_exit and np.any(ex >= 0):
        b = int(np.argmax(ex >= 0))
        raise LeftDomain(ex[b] * hs[b])
    t = np.stack([np.linspace(0.0, lengths[b], nsteps[b] + 1) for b in range(B)]) if len(set(nsteps)) == 1 else None
    return dict(samples=smp, exit=ex, h=hs, nsteps=nsteps, err=err, t=t)


@dataclass(eq=False)
class JacobiSolution:
    path: GeodesicPath
    t: np.ndarray
    V: np.ndarray
    P: np.ndarray
    V0: np.ndarray
    V0p: np.ndarray
    mode: str
    error_estimate: float = 0.0
    extra: dict = field(default_factory=dict)

    def tangential(self):
        return self.path.inner(self.V, self.path.u)

    def conserved_quantity(self):
        """d/dt <V, g'> - 2 <xi, g'> <J g', V>, which is constant for Sasakian fields."""
        pth = self.path
        Ju = np.einsum("tij,tj->ti", pth.J, pth.u)
        dVg = pth.inner(self.P, pth.u)  # d/dt <V, g'> = <nabla V, g'>
        return dVg - 2.0 * pth.slants() * pth.inner(Ju, self.V)


def _align(path, out):
    """Subsample an integration that may have used a refined step onto path.t."""
    n_path = len(path.t) - 1
    n_out = int(out["nsteps"][0])
    if n_out % n_path:
        raise RuntimeError("Jacobi grid is not a refinement of the geodesic grid")
    stride = n_out // n_path
    return {k: v[0, ::stride] for k, v in out["samples"].items()}


def _fields_on_path(conn, path, V0, P0, mode, tol=JACOBI_TOL, monitor=True):
    V0 = np.asarray(V0, dtype=float).reshape(conn.n, -1)
    P0 = np.asarray(P0, dtype=float).reshape(conn.n, -1)
    out = jacobi_batch(conn, path.x[0], path.u[0], path.t1, V0[None], P0[None], mode, h=path.h, tol=tol,
                       monitor=monitor)
    s = _align(path, out)
    drift = float(np.max(np.abs(s["x"] - path.x)))
    return s, float(out["err"][0]), drift


def integrate_jacobi(conn, path: GeodesicPath, V0, V0p, mode="auto", tol=JACOBI_TOL) -> JacobiSolution:
    """Jacobi field along ``path`` with V(0) = V0 and nabla V(0) = V0p."""
    conn = _as_connection(conn)
    m = resolve_mode(conn, mode)
    if m == "split":
        return split_integrate(conn, path, V0, V0p, tol=tol)
    s, err, drift = _fields_on_path(conn, path, V0, V0p, m, tol)
    return JacobiSolution(path, path.t, s["V"][..., 0], s["P"][..., 0], np.asarray(V0, float),
                          np.asarray(V0p, float), m, err, {"geodesic_drift": drift})


def integrate_jacobi_fields(conn, path, V0, P0, mode="auto", tol=JACOBI_TOL, monitor=True):
    """Several fields at once: V0, P0 of shape (n, k).  Returns (V, P) of shape (N+1, n, k)."""
    conn = _as_connection(conn)
    s, err, _ = _fields_on_path(conn, path, V0, P0, resolve_mode(conn, mode), tol, monitor)
    return s["V"], s["P"]


def dexp(conn, p, v, w, t=1.0, h=DEFAULT_STEP):
    """(d exp_p)_{tv}(tw) = V(t) for the Jacobi field with V(0)=0, V'(0)=w."""
    conn = _as_connection(conn)
    w = np.asarray(w, dtype=float)
    path = integrate_geodesic(conn, p, v, t, h=min(h, abs(t) / 4) if t else h)
    return integrate_jacobi(conn, path, np.zeros_like(w), w).V[-1]


def exp_and_dexp(conn, p, v, h=DEFAULT_STEP):
    """exp_p(v) and the Jacobian matrix of exp_p at v (columns dexp_v(e_j))."""
    conn = _as_connection(conn)
    n = conn.n
    out = jacobi_batch(conn, p, v, 1.0, np.zeros((1, n, n)), np.eye(n)[None], "auto", h=h, monitor=False)
    smp = out["samples"]
    return smp["x"][0, -1], smp["V"][0, -1]


# ---------------------------------------------------------------------------
# Taylor coefficients of |dexp(tw)|^2


def taylor_expansion_check(conn, p, v, w, t_max=0.2, h=2e-3, degree=6):
    """Fit |dexp_{tv}(tw)|^2 / t^2 = c2 + c3 t + c4 t^2 + ... and compare with the Sasakian prediction."""
    conn = _as_connection(conn)
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    path = integrate_geodesic(conn, p, v, t_max, h=h)
    sol = integrate_jacobi(conn, path, np.zeros_like(w), w)
    t = path.t[1:]
    N = path.inner(sol.V, sol.V)[1:] / t**2
    keep = t >= 0.05 * t_max
    powers = np.arange(degree - 1)
    A = t[keep, None] ** powers[None, :]
    coef, *_ = np.linalg.lstsq(A, N[keep], rcond=None)
    fit_resid = float(np.max(np.abs(A @ coef - N[keep])))
    f = conn.point_data(p)
    g = f["g"]
    Jv = f["J"] @ v
    Jvw = float(Jv @ g @ w)
    xiw = float(f["xi"] @ g @ w)
    R = curvature_tensor(conn, p)
    Rwvvw = R.inner(w, v, v, w)
    pred = {"c2": 1.0, "c3": 2.0 * Jvw * xiw, "c4": Jvw**2 - Rwvvw / 3.0}
    fitted = {"c2": float(coef[0]), "c3": float(coef[1]), "c4": float(coef[2])}
    return {
        "fitted": fitted,
        "predicted": pred,
        "residuals": {k: abs(fitted[k] - pred[k]) for k in pred},
        "fit_residual": fit_resid,
        "Jv_w": Jvw,
        "xi_w": xiw,
        "R_wvvw": Rwvvw,
        "sasakian": conn.tau_mode == "sasakian_zero",
    }


# ---------------------------------------------------------------------------
# tangential decomposition


@dataclass
class JacobiDecomposition:
    a: float
    b: float
    W: JacobiSolution
    tangential_integral: np.ndarray
    reconstruction_residual: float
    integral_residual: float


def _initial_split(path, V0, V0p):
    u0, g0, J0 = path.u[0], path.g[0], path.J[0]
    a = float(V0 @ g0 @ u0)
    b = float(V0p @ g0 @ u0 - 2.0 * path.slant * ((J0 @ u0) @ g0 @ V0))
    return a, b


def _decomposition(solution, W, a, b):
    path = solution.path
    recon = (a + b * path.t)[:, None] * path.u + W.V
    Ju = np.einsum("tij,tj->ti", path.J, path.u)
    integrand = path.inner(solution.V, Ju)
    tang = 2.0 * path.slant * cumulative_simpson(integrand, x=path.t, initial=0.0)
    return JacobiDecomposition(
        a=a,
        b=b,
        W=W,
        tangential_integral=tang,
        reconstruction_residual=float(np.max(np.abs(recon - solution.V))),
        integral_residual=float(np.max(np.abs(path.inner(W.V, path.u) - tang))),
    )


def decompose(solution: JacobiSolution, tol_arc=1e-6) -> JacobiDecomposition:
    """V = (a + b t) g' + W with W a Jacobi field, integrated on its own."""
    path = solution.path
    conn = path.conn
    if conn.tau_mode != "sasakian_zero":
        raise ModeMismatch("the tangential decomposition needs a Sasakian connection")
    path.require_arc_length(tol_arc)
    a, b = _initial_split(path, solution.V0, solution.V0p)
    u0 = path.u[0]
    W = integrate_jacobi(conn, path, solution.V0 - a * u0, solution.V0p - b * u0, mode="sasakian")
    return _decomposition(solution, W, a, b)


def decompose_batch(conn, paths, V0s, V0ps, tol=JACOBI_TOL, tol_arc=1e-6):
    """Sasakian Jacobi fields and their decompositions along several geodesics at once.

    All paths must share one parameter grid (as integrate_geodesics returns
    for a common length).  V and W are integrated in two batched runs.
    Returns a list of (JacobiSolution, JacobiDecomposition).
    """
    conn = _as_connection(conn)
    if conn.tau_mode != "sasakian_zero":
        raise ModeMismatch("the tangential decomposition needs a Sasakian connection")
    if not paths:
        return []
    t = paths[0].t
    if any(len(p.t) != len(t) or p.h != paths[0].h for p in paths):
        raise GridMismatch("decompose_batch needs paths on a common grid")
    for p in paths:
        p.require_arc_length(tol_arc)
    V0s = np.asarray(V0s, dtype=float)
    V0ps = np.asarray(V0ps, dtype=float)
    P = np.stack([p.x[0] for p in paths])
    U = np.stack([p.u[0] for p in paths])
    ab = [_initial_split(p, v, w) for p, v, w in zip(paths, V0s, V0ps)]
    W0 = np.stack([v - a * p.u[0] for p, v, (a, _) in zip(paths, V0s, ab)])
    W0p = np.stack([w - b * p.u[0] for p, w, (_, b) in zip(paths, V0ps, ab)])
    runs = []
    for A, B in ((V0s, V0ps), (W0, W0p)):
        out = jacobi_batch(conn, P, U, t[-1], A[..., None], B[..., None], "sasakian", h=paths[0].h, tol=tol)
        runs.append(out)
    result = []
    for i, path in enumerate(paths):
        sols = []
        for out, (A, B) in zip(runs, ((V0s, V0ps), (W0, W0p))):
            stride = int(out["nsteps"][i]) // (len(t) - 1)
            smp = {k: v[i, ::stride] for k, v in out["samples"].items()}
            sols.append(JacobiSolution(path, t, smp["V"][..., 0], smp["P"][..., 0], A[i], B[i], "sasakian",
                                       float(out["err"][i]),
                                       {"geodesic_drift": float(np.max(np.abs(smp["x"] - path.x)))}))
        result.append((sols[0], _decomposition(sols[0], sols[1], *ab[i])))
    return result


# ---------------------------------------------------------------------------
# split system


def split_integrate(conn, path: GeodesicPath, V0, V0p, tol=JACOBI_TOL) -> JacobiSolution:
    """Horizontal block by the comparison equation, then the vertical coefficient by quadrature."""
    conn = _as_connection(conn)
    if conn.tau_mode != "sasakian_zero":
        raise ModeMismatch("the split system needs a Sasakian connection")
    V0 = np.asarray(V0, dtype=float)
    V0p = np.asarray(V0p, dtype=float)
    th0 = path.theta[0]
    xi0 = path.xi[0]
    VH0 = V0 - (th0 @ V0) * xi0
    PH0 = V0p - (th0 @ V0p) * xi0
    s, err, _ = _fields_on_path(conn, path, VH0, PH0, "comparison", tol)
    VH = s["V"][..., 0]
    PH = s["P"][..., 0]
    Ju = np.einsum("tij,tj->ti", path.J, path.u)
    src = 2.0 * path.inner(Ju, PH)
    fp = th0 @ V0p + cumulative_simpson(src, x=path.t, initial=0.0)
    f = th0 @ V0 + cumulative_simpson(fp, x=path.t, initial=0.0)
    V = VH + f[:, None] * path.xi
    P = PH + fp[:, None] * path.xi
    tang = path.inner(VH, path.u)
    lin = np.polyfit(path.t, tang, 1)
    affine_resid = float(np.max(np.abs(np.polyval(lin, path.t) - tang)))
    return JacobiSolution(path, path.t, V, P, V0, V0p, "split", err,
                          {"V_H": VH, "f": f, "tangential_affine_residual": affine_resid})


# ---------------------------------------------------------------------------
# Heisenberg closed forms


def heisenberg_frame_along(m, p, v):
    """Frame E_A at p for the geodesic with initial velocity v (unit), as columns.

    Non-vertical: E_0 = xi, E_1 = J v_H/|.|, E_2 = v_H/|.|, rest by
    Gram-Schmidt of the horizontal coordinate directions.  Vertical:
    E_0 = xi and Gram-Schmidt of the horizontal coordinate directions.
    """
    from .builtins import heisenberg_frame

    n = 2 * m + 1
    L = heisenberg_frame(m, p)  # columns X_1..X_m, Y_1..Y_m, xi; orthonormal
    c = np.linalg.solve(L, np.asarray(v, dtype=float))  # frame coefficients
    vH = c.copy()
    vH[-1] = 0.0
    Jmat = np.zeros((n, n))
    for i in range(m):
        Jmat[m + i, i] = 1.0
        Jmat[i, m + i] = -1.0
    cols = [np.eye(n)[-1]]
    nh = np.linalg.norm(vH)
    if nh > 1e-12:
        cols += [Jmat @ vH / nh, vH / nh]
    for e in np.eye(n)[: 2 * m]:
        w = e.copy()
        for q in cols:
            w = w - (q @ w) * q
        if np.linalg.norm(w) > 1e-8 and len(cols) < n:
            cols.append(w / np.linalg.norm(w))
    return np.stack(cols, axis=1)  # frame coefficients (columns)


def heisenberg_closed_form(conn_or_chart, p, v, a, b, t):
    """Jacobi field V(t) = (a_1 s t^2 + a_0 t + b_0) xi + sum_i (a_i t + b_i) E_i on H_m.

    Uses the exact geodesic gamma(t) = p + t v and the left-invariant
    parallel frame, independently of any integrator.  Returns coordinates
    of V at each t, shape (len(t), n).
    """
    from .builtins import heisenberg_frame

    chart = getattr(conn_or_chart, "chart", conn_or_chart)
    if not chart.name.startswith("heisenberg"):
        raise NotHeisenberg(f"closed form only holds on the Heisenberg group, not {chart.name!r}")
    m = chart.m
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = np.asarray(t, dtype=float)
    C = heisenberg_frame_along(m, p, v)
    c = np.linalg.solve(heisenberg_frame(m, p), v)
    slant = c[-1] / np.linalg.norm(c)
    s = np.sqrt(max(0.0, 1.0 - slant**2))
    vertical = np.linalg.norm(c[:-1]) < 1e-12
    f = (a[None, :] * t[:, None]) + b[None, :]
    if not vertical:
        f[:, 0] = a[1] * s * t**2 + a[0] * t + b[0]
    out = np.empty((len(t), chart.dim))
    for k, tt in enumerate(t):
        L = heisenberg_frame(m, p + tt * v)
        out[k] = L @ (C @ f[k])
    return out


def heisenberg_coefficients(conn_or_chart, p, v, V0, V0p):
    """(a_A, b_A) such that the closed form has V(0) = V0 and V'(0) = V0p."""
    from .builtins import heisenberg_frame

    chart = getattr(conn_or_chart, "chart", conn_or_chart)
    if not chart.name.startswith("heisenberg"):
        raise NotHeisenberg(chart.name)
    E = heisenberg_frame(chart.m, p) @ heisenberg_frame_along(chart.m, p, v)
    return np.linalg.solve(E, V0p), np.linalg.solve(E, V0)


# ---------------------------------------------------------------------------
# conjugate points


@dataclass
class ConjugatePoint:
    t: float
    multiplicity: int
    sigma_ratio: float
    kind: str  # "sign_change" or "dip"


@dataclass
class ConjugateSearchResult:
    points: list
    t: np.ndarray
    sigma_ratio: np.ndarray
    det_sign: np.ndarray
    partial: bool
    t_exit: float | None
    min_ratio_after: float

    @property
    def first(self):
        return self.points[0].t if self.points else None


CONJUGATE_STEP = 4e-2
DIP_THRESHOLD = 1e-6
MULT_THRESHOLD = 1e-5


def _normalised(Ms, gs):
    Ls = np.linalg.cholesky(gs)
    return np.einsum("tji,tjk->tik", Ls, Ms)


def _ratio_det(Mt):
    s = np.linalg.svd(Mt, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = s[..., -1] / s[..., 0]
    return r, np.sign(np.linalg.det(Mt)), s


def _analyse(conn, smp_b, t, nvalid, h, search_from=0.0, refine=True):
    """Locate conjugate points on one integrated multi-field record."""
    x = smp_b["x"][: nvalid + 1]
    V = smp_b["V"][: nvalid + 1]
    g = conn.structure.g_theta(x)
    Mt = _normalised(V, g)
    ratio = np.ones(len(t))
    sign = np.ones(len(t))
    r, sg, _ = _ratio_det(Mt[1:])
    ratio[1:] = r
    sign[1:] = sg
    points = []
    kernel = kernel_for(conn, "jacobi", "sasakian" if conn.tau_mode == "sasakian_zero" else "general")
    start = max(1, int(np.searchsorted(t, search_from)))
    cand = []
    for k in range(start, len(t) - 1):
        if sign[k] * sign[k + 1] < 0:
            cand.append(("sign_change", k))
    for k in range(max(start, 2), len(t) - 1):
        if ratio[k] <= ratio[k - 1] and ratio[k] <= ratio[k + 1] and ratio[k] < 1e-2:
            if not any(abs(k - c[1]) <= 1 for c in cand):
                cand.append(("dip", k))
    cand.sort(key=lambda c: c[1])
    for kind, k in cand:
        k0 = k if kind == "sign_change" else max(k - 1, 0)
        tf, Vf, gf = _refine_record(conn, kernel, smp_b, k0, h, 2 if kind == "dip" else 1)
        Mf = _normalised(Vf, gf)
        rf, sf, _ = _ratio_det(Mf)
        spl = CubicHermiteSpline(tf, Mf, np.gradient(Mf, tf, axis=0, edge_order=2), axis=0)
        if kind == "sign_change":
            j = np.nonzero(sf[:-1] * sf[1:] < 0)[0]
            if len(j) == 0:
                continue
            j = j[0]
            tstar = brentq(lambda tt: np.linalg.det(spl(tt)), tf[j], tf[j + 1], xtol=1e-12)
        else:
            j = int(np.argmin(rf))
            lo, hi = tf[max(j - 1, 0)], tf[min(j + 1, len(tf) - 1)]
            res = minimize_scalar(lambda tt: _ratio_det(spl(tt)[None])[0][0], bounds=(lo, hi),
                                  method="bounded", options={"xatol": 1e-10})
            tstar = float(res.x)
        rr, _, ss = _ratio_det(spl(tstar)[None])
        if kind == "dip" and rr[0] >= DIP_THRESHOLD:
            continue
        mult = int(np.sum(ss[0] / ss[0, 0] < MULT_THRESHOLD))
        points.append(ConjugatePoint(float(tstar), max(mult, 1), float(rr[0]), kind))
    return points, ratio, sign


def _refine_record(conn, kernel, smp_b, k0, h, nsamples):
    """Re-integrate from sample k0 over ``nsamples`` steps at 1/64 resolution."""
    state = {key: smp_b[key][k0][None] for key in ("x", "u", "V", "P")}
    sub = 64 * nsamples
    smp, _ = run_rk4(kernel, state, np.array([h / 64.0]), np.array([sub]), 2)
    tf = k0 * h + np.arange(sub + 1) * h / 64.0
    x = smp["x"][0]
    V = smp["V"][0]
    g = conn.structure.g_theta(x)
    return tf, V, g


def conjugate_search_batch(conn, P, Vs, L_max, h=None, tol=JACOBI_TOL, search_from=0.0):
    """Conjugate points along several geodesics (one batched integration)."""
    conn = _as_connection(conn)
    h = CONJUGATE_STEP if h is None else h
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Vs = np.atleast_2d(np.asarray(Vs, dtype=float))
    B = max(len(P), len(Vs))
    P = np.broadcast_to(P, (B, conn.n)).copy()
    Vs = np.broadcast_to(Vs, (B, conn.n)).copy()
    n = conn.n
    E0 = np.stack([_frame0(conn, p) for p in P])
    out = jacobi_batch(conn, P, Vs, L_max, np.zeros((B, n, n)), E0, "auto", h=h, tol=tol, allow_exit=True)
    smp = out["samples"]
    results = []
    for b in range(B):
        nst = int(out["nsteps"][b])
        hb = float(out["h"][b])
        t = np.linspace(0.0, L_max, nst + 1)
        ex = int(out["exit"][b])
        nvalid = nst if ex < 0 else ex - 1
        rec = {k: v[b] for k, v in smp.items()}
        pts, ratio, sign = _analyse(conn, rec, t[: nvalid + 1], nvalid, hb, search_from)
        after = ratio[1:][t[1 : nvalid + 1] > 0.05 * L_max]
        results.append(ConjugateSearchResult(
            points=pts,
            t=t[: nvalid + 1],
            sigma_ratio=ratio,
            det_sign=sign,
            partial=ex >= 0,
            t_exit=float(t[ex]) if ex >= 0 else None,
            min_ratio_after=float(np.min(after)) if len(after) else float("nan"),
        ))
    return results


def conjugate_search(conn, p, v, L_max, h=None, tol=JACOBI_TOL) -> ConjugateSearchResult:
    """Conjugate points to p along gamma_v on (0, L_max]."""
    return conjugate_search_batch(conn, p, v, L_max, h, tol)[0]
