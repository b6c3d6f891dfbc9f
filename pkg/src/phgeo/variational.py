"""Index forms, the comparison equation and the curvature comparison experiments.

Fields along a geodesic are handled as sampled pairs (X, nabla X) on the
geodesic grid.  Piecewise-smooth fields carry breakpoints (grid indices);
the derivative is then given piece by piece so that both one-sided limits
at a corner are available to the quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.stats import qmc, norm

from .connection import _as_connection, horizontal_sectional_curvature, orthonormal_frame, ricci
from .errors import ConjugatePointPresent, NotHorizontal, PhgeoError
from .geodesics import GeodesicPath, integrate_geodesic
from .jacobi import (
    JacobiSolution,
    conjugate_search,
    conjugate_search_batch,
    integrate_jacobi,
    integrate_jacobi_fields,
)

INDEX_STEP = 2.5e-3
EQUALITY_RADIUS = 1e-6
NO_CONJUGATE_EXPECTED = "NoConjugateExpected"


# ---------------------------------------------------------------------------
# index form


@dataclass(eq=False)
class IndexFormEvaluation:
    path: GeodesicPath
    X: np.ndarray
    value: float
    integrand: list
    error_estimate: float
    breakpoints: tuple = ()


def _pieces(npts, breakpoints):
    edges = [0] + sorted(int(b) for b in breakpoints if 0 < b < npts - 1) + [npts - 1]
    return list(zip(edges[:-1], edges[1:]))


def _simpson_with_error(y, x):
    s = simpson(y, x=x)
    if len(x) >= 5 and (len(x) - 1) % 4 == 0:
        s2 = simpson(y[::2], x=x[::2])
        return s + (s - s2) / 15.0, abs(s - s2) / 15.0
    if len(x) >= 5 and (len(x) - 1) % 2 == 0:
        s2 = simpson(y[::2], x=x[::2])
        return s, abs(s - s2) / 15.0
    return s, 0.0


def _curvature_along(path):
    conn = path.conn
    key = "_curvature"
    R = path.__dict__.get(key)
    if R is None:
        sign = conn.calibrate()[0]
        R = path.__dict__[key] = sign * conn.riemann(path.x)
    return R


def index_form(conn, path: GeodesicPath, X, nablaX, breakpoints=()) -> IndexFormEvaluation:
    """I(X) = int <nabla X, nabla X> - <R(X, g') g', X> dt, Simpson per smooth piece.

    ``nablaX`` is an (N+1, n) array for smooth fields or, with breakpoints,
    a list holding one array per piece (each including both end samples).
    """
    conn = _as_connection(conn)
    path.require_arc_length()
    X = np.asarray(X, dtype=float)
    if X.shape != path.x.shape:
        raise ValueError(f"field shape {X.shape} does not match the geodesic grid {path.x.shape}")
    pieces = _pieces(len(path.t), breakpoints)
    if isinstance(nablaX, (list, tuple)):
        if len(nablaX) != len(pieces):
            raise ValueError("one derivative array per smooth piece is required")
        dX = [np.asarray(d, dtype=float) for d in nablaX]
    else:
        nablaX = np.asarray(nablaX, dtype=float)
        dX = [nablaX[a : b + 1] for a, b in pieces]
    R = _curvature_along(path)
    g = path.g
    u = path.u
    RXuu = np.einsum("tlkij,ti,tj,tk->tl", R, X, u, u)
    curv = np.einsum("ti,tij,tj->t", RXuu, g, X)
    total, err, traces = 0.0, 0.0, []
    for (a, b), d in zip(pieces, dX):
        sl = slice(a, b + 1)
        f = np.einsum("ti,tij,tj->t", d, g[sl], d) - curv[sl]
        val, e = _simpson_with_error(f, path.t[sl])
        total += val
        err += e
        traces.append(f)
    return IndexFormEvaluation(path, X, float(total), traces, float(err), tuple(breakpoints))


# ---------------------------------------------------------------------------
# comparison equation and the Z basis


def solve_comparison_equation(conn, path: GeodesicPath, Z0, Z0p) -> JacobiSolution:
    """nabla^2 Z = R(g', Z) g' along path with Z(0) = Z0, nabla Z(0) = Z0p."""
    return integrate_jacobi(conn, path, Z0, Z0p, mode="comparison")


def _horizontal_complement(g, xi, u):
    """g-orthonormal horizontal vectors orthogonal to the horizontal part of u."""
    n = len(xi)
    uH = u - (xi @ g @ u) * xi
    basis = [xi]
    if np.sqrt(max(uH @ g @ uH, 0.0)) > 1e-10:
        basis.append(uH / np.sqrt(uH @ g @ uH))
    out = []
    for e in np.eye(n):
        w = e.copy()
        for q in basis + out:
            w = w - (q @ g @ w) * q
        nrm = np.sqrt(max(w @ g @ w, 0.0))
        if nrm > 1e-8 and len(basis) + len(out) < n:
            out.append(w / nrm)
    return out


@dataclass(eq=False)
class ComparisonBasis:
    """Z_A with Z_A(0) = 0 solving the comparison equation, as (N+1, n, n) arrays."""

    path: GeodesicPath
    Z: np.ndarray
    dZ: np.ndarray
    labels: list
    comparison_residual: float  # horizontal parts of Jacobi fields vs direct comparison solves

    def reciprocity(self):
        """max_t |<Z_A, Z_B'> - <Z_B, Z_A'>| over all pairs."""
        g = self.path.g
        M = np.einsum("tia,tij,tjb->tab", self.Z, g, self.dZ)
        return float(np.max(np.abs(M - np.swapaxes(M, 1, 2))))

    def independence_profile(self):
        """sigma_min of [Z_A(t)/t] in a g-orthonormal gauge, for t > 0."""
        L = np.linalg.cholesky(self.path.g[1:])
        Mt = np.einsum("tji,tjk->tik", L, self.Z[1:]) / self.path.t[1:, None, None]
        return np.linalg.svd(Mt, compute_uv=False)[:, -1]


def comparison_basis(conn, path: GeodesicPath) -> ComparisonBasis:
    """{t g', t xi, V_j - theta(V_j) xi} with V_j Sasakian Jacobi fields, V_j(0) = 0."""
    conn = _as_connection(conn)
    n = conn.n
    g0, xi0, u0 = path.g[0], path.xi[0], path.u[0]
    comp = _horizontal_complement(g0, xi0, u0)
    Vs, Ps = integrate_jacobi_fields(conn, path, np.zeros((n, len(comp))), np.stack(comp, axis=1), "sasakian")
    th = path.theta
    xi = path.xi
    ZH = Vs - np.einsum("ti,tia->ta", th, Vs)[:, None, :] * xi[:, :, None]
    dZH = Ps - np.einsum("ti,tia->ta", th, Ps)[:, None, :] * xi[:, :, None]
    Zc, dZc = integrate_jacobi_fields(conn, path, np.zeros((n, len(comp))), np.stack(comp, axis=1), "comparison")
    resid = float(max(np.max(np.abs(ZH - Zc)), np.max(np.abs(dZH - dZc)))) if comp else 0.0
    t = path.t[:, None]
    cols = [(t * xi, xi, "t*xi")]
    if len(comp) < n - 1:
        # non-vertical: t g' is independent of t xi
        cols.insert(0, (t * path.u, path.u, "t*gamma'"))
    Z = np.concatenate([c[0][:, :, None] for c in cols] + [ZH], axis=2)
    dZ = np.concatenate([c[1][:, :, None] for c in cols] + [dZH], axis=2)
    labels = [c[2] for c in cols] + [f"V{j}_H" for j in range(len(comp))]
    return ComparisonBasis(path, Z, dZ, labels, resid)


def index_identity(basis: ComparisonBasis, X, nablaX, breakpoints=()):
    """Right-hand side of the index identity for X = sum f^A Z_A.

    f is recovered pointwise from X = Z f (at t = 0 from the first-order
    limits), and sum f^A' Z_A = nabla X - sum f^A Z_A', so no derivative
    of f is ever formed.  Returns <X, sum f^B Z_B'>(l) + int |sum f^A' Z_A|^2.
    """
    path = basis.path
    X = np.asarray(X, dtype=float)
    Z, dZ = basis.Z, basis.dZ
    pieces = _pieces(len(path.t), breakpoints)
    if isinstance(nablaX, (list, tuple)):
        dX = [np.asarray(d, dtype=float) for d in nablaX]
    else:
        dX = [np.asarray(nablaX, dtype=float)[a : b + 1] for a, b in pieces]
    f = np.empty((len(path.t), Z.shape[2]))
    f[1:] = np.linalg.solve(Z[1:], X[1:][..., None])[..., 0]
    f[0] = np.linalg.solve(dZ[0], dX[0][0])
    g = path.g
    total = 0.0
    for (a, b), d in zip(pieces, dX):
        sl = slice(a, b + 1)
        W = d - np.einsum("tia,ta->ti", dZ[sl], f[sl])
        val, _ = _simpson_with_error(np.einsum("ti,tij,tj->t", W, g[sl], W), path.t[sl])
        total += val
    end = X[-1] @ g[-1] @ (dZ[-1] @ f[-1])
    return float(total + end)


# ---------------------------------------------------------------------------
# index comparison


def _check_conjugate_free(conn, path, l):
    res = conjugate_search(conn, path.x[0], path.u[0], l)
    inside = [q for q in res.points if q.t <= l + 1e-9]
    if inside:
        q = inside[0]
        raise ConjugatePointPresent(
            f"gamma(0) has a conjugate point at t = {q.t:.6f} (multiplicity {q.multiplicity}) on [0, {l}]"
        )
    return res


def _perturbations(path, rng, trials, corner_every=4):
    """Random admissible variations eta with eta(0) = eta(l) = 0.

    Most are 5-mode sine series on parallel frames; every ``corner_every``-th
    is a tent profile with a corner at a grid node (piecewise differentiable).
    Returns a list of (eta, nabla_eta, breakpoints).
    """
    t = path.t
    l = t[-1]
    E = path.E  # transported orthonormal frame, columns parallel
    n = E.shape[1]
    N = len(t) - 1
    out = []
    for k in range(trials):
        amp = 10.0 ** rng.uniform(-2, 0)
        if corner_every and k % corner_every == corner_every - 1:
            j = 4 * int(rng.integers(1, N // 4))
            tc = t[j]
            c = rng.standard_normal(n) * amp
            phi = np.where(t <= tc, t / tc, (l - t) / (l - tc))
            eta = phi[:, None] * np.einsum("tia,a->ti", E, c)
            dl = np.einsum("tia,a->ti", E[: j + 1], c) / tc
            dr = -np.einsum("tia,a->ti", E[j:], c) / (l - tc)
            out.append((eta, [dl, dr], (j,)))
            continue
        C = rng.standard_normal((5, n)) * amp / np.arange(1, 6)[:, None]
        modes = np.arange(1, 6)
        s = np.sin(np.pi * np.outer(t, modes) / l)
        ds = (np.pi * modes / l) * np.cos(np.pi * np.outer(t, modes) / l)
        coef = s @ C
        dcoef = ds @ C
        out.append((np.einsum("tia,ta->ti", E, coef), np.einsum("tia,ta->ti", E, dcoef), ()))
    return out


@dataclass
class IndexComparisonReport:
    mode: str
    length: float
    target: list
    I_Y: float
    min_gap: float
    equality_violations: int
    identity_residual: float
    reciprocity: float
    independence_min: float
    horizontal_residual: float
    comparison_residual: float
    quadrature_error: float
    trials: int
    gaps: list = field(default_factory=list)

    def to_dict(self):
        d = dict(self.__dict__)
        d.pop("gaps")
        return d


def index_comparison(conn, path: GeodesicPath, target=None, trials=200, seed=0, mode="strict",
                     check_conjugate=True) -> IndexComparisonReport:
    """Compare I(X) with I(Y) for admissible X sharing Y's endpoints.

    Y solves the comparison equation with Y(0) = 0 and Y(l) = target
    (target None means 0, the corollary case).  In ``strict`` mode Y must
    be a horizontal Jacobi field, i.e. theta(Y) = 0 and <J g', nabla Y> = 0
    along the segment; ``remark`` mode accepts any comparison solution.
    """
    conn = _as_connection(conn)
    if mode not in ("strict", "remark"):
        raise ValueError("mode must be 'strict' or 'remark'")
    path.require_arc_length()
    n = conn.n
    l = float(path.t[-1])
    cache = path.__dict__.setdefault("_index_cache", {})
    if check_conjugate and "conjugate_free" not in cache:
        _check_conjugate_free(conn, path, l)
        cache["conjugate_free"] = True
    if "fundamental" not in cache:
        E0 = orthonormal_frame(path.g[0], path.xi[0])
        cache["fundamental"] = integrate_jacobi_fields(conn, path, np.zeros((n, n)), E0, "comparison")
    Vs, Ps = cache["fundamental"]
    target = np.zeros(n) if target is None else np.asarray(target, dtype=float)
    s = np.linalg.svd(Vs[-1], compute_uv=False)
    if s[-1] < 1e-9 * s[0]:
        raise ConjugatePointPresent("the comparison equation has a focal configuration at t = l")
    c = np.linalg.solve(Vs[-1], target)
    Y = Vs @ c
    dY = Ps @ c
    Ju = np.einsum("tij,tj->ti", path.J, path.u)
    horiz = float(max(np.max(np.abs(np.einsum("ti,ti->t", path.theta, Y))),
                      np.max(np.abs(path.inner(Ju, dY)))))
    if mode == "strict" and horiz > 1e-6:
        raise NotHorizontal(
            f"the comparison solution reaching the target is not a horizontal Jacobi field (residual {horiz:.2e})"
        )
    IY = index_form(conn, path, Y, dY)
    if "basis" not in cache:
        cache["basis"] = comparison_basis(conn, path)
    basis = cache["basis"]
    rng = np.random.default_rng(seed)
    gaps, viol, ident, qerr = [], 0, 0.0, IY.error_estimate
    ident = abs(index_identity(basis, Y, dY) - IY.value) / max(1.0, abs(IY.value))
    for eta, deta, bps in _perturbations(path, rng, trials):
        X = Y + eta
        if bps:
            j = bps[0]
            dX = [dY[: j + 1] + deta[0], dY[j:] + deta[1]]
        else:
            dX = dY + deta
        IX = index_form(conn, path, X, dX, bps)
        gap = IX.value - IY.value
        gaps.append(gap)
        qerr = max(qerr, IX.error_estimate)
        if abs(gap) < 1e-7 and np.max(np.abs(eta)) >= EQUALITY_RADIUS:
            viol += 1
        rhs = index_identity(basis, X, dX, bps)
        ident = max(ident, abs(rhs - IX.value) / max(1.0, abs(IX.value)))
    return IndexComparisonReport(
        mode=mode,
        length=l,
        target=target.tolist(),
        I_Y=IY.value,
        min_gap=float(min(gaps)) if gaps else 0.0,
        equality_violations=viol,
        identity_residual=float(ident),
        reciprocity=basis.reciprocity(),
        independence_min=float(np.min(basis.independence_profile())),
        horizontal_residual=horiz,
        comparison_residual=basis.comparison_residual,
        quadrature_error=float(qerr),
        trials=trials,
        gaps=gaps,
    )


# ---------------------------------------------------------------------------
# curvature sampling


def _horizontal_pair(f, rng):
    E = orthonormal_frame(f["g"], f["xi"])[:, 1:]
    a, b = rng.standard_normal((2, E.shape[1]))
    return E @ a, E @ b


def measure_horizontal_curvature(conn, samples=200, seed=0):
    """Min and max of K^H and of Ric(X, X) (X horizontal unit) over sampled points and planes."""
    conn = _as_connection(conn)
    pts = conn.chart.sample_points(samples, seed=seed)
    rng = np.random.default_rng(seed)
    K, Ric = [], []
    for p in pts:
        f = conn.point_data(p)
        X, Y = _horizontal_pair(f, rng)
        K.append(horizontal_sectional_curvature(conn, p, X, Y))
        X = X / np.sqrt(X @ f["g"] @ X)
        Ric.append(ricci(conn, p, X, X))
    K = np.array(K)
    Ric = np.array(Ric)
    return {"K_min": float(K.min()), "K_max": float(K.max()), "Ric_min": float(Ric.min()),
            "Ric_max": float(Ric.max()), "samples": int(samples)}


# ---------------------------------------------------------------------------
# Bonnet-Myers and Cartan-Hadamard experiments


def _start_candidates(conn, seed=0, count=8):
    lo, hi = conn.chart.sample_box if conn.chart.sample_box is not None else conn.chart.domain
    pts = [0.5 * (lo + hi)] + list(conn.chart.sample_points(count, seed=seed))
    return [np.asarray(p, dtype=float) for p in pts]


def _slanted_directions(conn, p, c):
    f = conn.point_data(p)
    E = orthonormal_frame(f["g"], f["xi"])
    s = np.sqrt(max(0.0, 1.0 - c * c))
    out = []
    for j in range(1, E.shape[1]):
        for sg in (1.0, -1.0):
            out.append(c * E[:, 0] + sg * s * E[:, j])
    return out


def bonnet_myers_experiment(conn, slants=(0.0, 0.25, 0.5, 0.75, 0.9), k0_mode="measured", k0=None,
                            curvature_samples=200, seed=0, slack=1e-3):
    """First conjugate points along slanted unit geodesics against pi / sqrt(k0 (1 - c^2)).

    k0 is the measured minimum of K^H minus 1e-6 (``k0_mode='measured'``)
    or a caller-supplied value.  The Ricci variant uses Ric_min / (2m - 1).
    Each row tries start points and horizontal directions in a fixed order
    until the whole search interval stays inside the chart.
    """
    conn = _as_connection(conn)
    m = conn.chart.m
    meas = measure_horizontal_curvature(conn, curvature_samples, seed)
    if k0_mode == "measured":
        k0 = meas["K_min"] - 1e-6
    elif k0 is None:
        raise ValueError("k0 must be given when k0_mode is not 'measured'")
    if not k0 > 0:
        raise PhgeoError(f"the horizontal curvature lower bound {k0:.3e} is not positive")
    k_ric = (meas["Ric_min"] - 1e-6) / (2 * m - 1)
    rows = []
    for c in slants:
        c = float(c)
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"slant {c} outside [0, 1]")
        if c >= 1.0:
            rows.append({"slant": c, "status": NO_CONJUGATE_EXPECTED, "t_star": None, "bound": None,
                         "bound_ricci": None, "passed": True})
            continue
        bound = np.pi / np.sqrt(k0 * (1.0 - c * c))
        bound_ric = np.pi / np.sqrt(k_ric * (1.0 - c * c)) if k_ric > 0 else float("inf")
        L = 1.5 * bound
        row = None
        for p in _start_candidates(conn, seed):
            for v in _slanted_directions(conn, p, c):
                res = conjugate_search(conn, p, v, L)
                if res.partial:
                    continue
                t_star = res.first
                row = {
                    "slant": c,
                    "status": "found" if t_star is not None else "none_found",
                    "t_star": t_star,
                    "multiplicity": res.points[0].multiplicity if res.points else 0,
                    "bound": bound,
                    "bound_ricci": bound_ric,
                    "search_length": L,
                    "start": p.tolist(),
                    "direction": v.tolist(),
                    "passed": t_star is not None and t_star <= bound + slack,
                    "passed_ricci": t_star is not None and t_star <= bound_ric + slack,
                }
                break
            if row is not None:
                break
        if row is None:
            row = {"slant": c, "status": "left_domain", "t_star": None, "bound": bound,
                   "bound_ricci": bound_ric, "search_length": L, "passed": False, "passed_ricci": False}
        rows.append(row)
    found = [r["t_star"] for r in rows if r.get("t_star") is not None]
    monotone = all(b >= a - 1e-9 for a, b in zip(found, found[1:]))
    return {
        "k0": k0,
        "k0_mode": k0_mode,
        "k_ricci": k_ric,
        "curvature": meas,
        "rows": rows,
        "monotone": monotone,
        "passed": monotone and all(r["passed"] for r in rows),
    }


def quasi_random_directions(conn, p, count, seed=0):
    """Unit vectors at p from a scrambled Sobol sequence pushed through the normal quantile."""
    conn = _as_connection(conn)
    f = conn.point_data(np.asarray(p, dtype=float))
    E = orthonormal_frame(f["g"], f["xi"])
    sob = qmc.Sobol(conn.n, scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(count, 1))))
    u = sob.random_base2(m)[:count]
    z = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z @ E.T


def cartan_hadamard_sweep(conn, directions=64, L_max=20.0, seed=0, start=None, eps=None):
    """Conjugate search along quasi-random unit directions (all slants).

    Returns a report; any conjugate point is listed with the start point and
    direction that reproduce it.
    """
    conn = _as_connection(conn)
    p = _start_candidates(conn, seed)[0] if start is None else np.asarray(start, dtype=float)
    V = quasi_random_directions(conn, p, directions, seed)
    results = conjugate_search_batch(conn, p, V, L_max)
    eps = 0.05 * L_max if eps is None else eps
    found, margins, partial = [], [], 0
    for v, r in zip(V, results):
        partial += int(r.partial)
        after = r.sigma_ratio[1:][r.t[1:] > eps]
        margins.append(float(np.min(after)) if len(after) else float("nan"))
        for q in r.points:
            found.append({"start": p.tolist(), "direction": v.tolist(), "t": q.t,
                          "multiplicity": q.multiplicity, "kind": q.kind})
    return {
        "directions": int(directions),
        "L_max": float(L_max),
        "start": p.tolist(),
        "conjugate_points": found,
        "count": len(found),
        "partial": partial,
        "min_sigma_ratio": float(np.nanmin(margins)) if margins else float("nan"),
        "sigma_ratio_by_direction": margins,
        "passed": len(found) == 0,
    }
