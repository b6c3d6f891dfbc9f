"""Charted pseudo-Hermitian structures and their derived data.

A chart carries the contact form theta and the complex structure J as
jnp-traceable coefficient fields on a box in R^(2m+1).  Everything else
(d theta, the Reeb field, the Levi form, the Webster metric) is derived
here, either by automatic differentiation or by finite differences.

Conventions used throughout the package:

* d theta is normalised as d theta(X, Y) = 1/2 (X theta(Y) - Y theta(X)
  - theta([X, Y])), so in coordinates dtheta[i, j] = (d_i theta_j -
  d_j theta_i) / 2.
* The Levi form is L(X, Y) = d theta(X, JY), i.e. the matrix D @ J.
* Matrices representing (1,1)-tensors act on column vectors: (JX)^k =
  J[k, j] X^j.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable

import jax
import jax.numpy as jnp
import numpy as np
from scipy.stats import qmc

from .errors import ChartBoundary, NotPositiveDefinite, PhgeoError, SingularStructure

ANALYTIC = "analytic"
FINITE_DIFFERENCE = "finite_difference"

# Step growth per nesting level of finite differences.  Each level feeds on
# the rounding noise of the one below, so deeper levels need wider stencils.
FD_LADDER = 300.0


def central_difference(f, h):
    """Jacobian of f by second-order central differences.

    The result follows the jax.jacfwd layout: output shape + (n,).
    """

    def jac(x):
        n = x.shape[0]
        step = h * jnp.maximum(1.0, jnp.max(jnp.abs(x)))
        E = jnp.eye(n, dtype=x.dtype) * step
        fp = jax.vmap(lambda e: f(x + e))(E)
        fm = jax.vmap(lambda e: f(x - e))(E)
        return jnp.moveaxis((fp - fm) / (2.0 * step), 0, -1)

    return jac


def richardson_difference(f, h):
    """Fourth-order Jacobian: Richardson extrapolation of two central stencils."""

    def jac(x):
        n = x.shape[0]
        step = h * jnp.maximum(1.0, jnp.max(jnp.abs(x)))
        E = jnp.eye(n, dtype=x.dtype) * step
        f1p = jax.vmap(lambda e: f(x + e))(E)
        f1m = jax.vmap(lambda e: f(x - e))(E)
        f2p = jax.vmap(lambda e: f(x + 2 * e))(E)
        f2m = jax.vmap(lambda e: f(x - 2 * e))(E)
        d1 = (f1p - f1m) / (2.0 * step)
        d2 = (f2p - f2m) / (4.0 * step)
        return jnp.moveaxis((4.0 * d1 - d2) / 3.0, 0, -1)

    return jac


class Polynomial:
    """Sparse polynomial sum_k c_k prod_i x_i^{p_ki}, evaluable on jnp tracers."""

    def __init__(self, terms, nvars):
        self.nvars = int(nvars)
        self.coeffs = np.array([float(c) for c, _ in terms] or [0.0])
        powers = [list(p) for _, p in terms] or [[0] * self.nvars]
        self.powers = np.array(powers, dtype=int).reshape(-1, self.nvars)
        if np.any(self.powers < 0):
            raise ValueError("negative exponent in polynomial table")

    @classmethod
    def from_json(cls, obj, nvars):
        if isinstance(obj, (int, float)):
            return cls([(obj, [0] * nvars)], nvars)
        if isinstance(obj, dict):
            obj = obj.get("terms", [])
        return cls([(t[0], t[1]) for t in obj], nvars)

    def __call__(self, x):
        mono = jnp.prod(x[None, :] ** self.powers, axis=1)
        return jnp.dot(self.coeffs, mono)


@dataclass(frozen=True, eq=False)
class PseudoHermitianChart:
    """A strictly pseudoconvex pseudo-Hermitian structure on one coordinate box.

    ``theta`` maps a point to the covector coefficients of theta and
    ``J_full`` to the matrix of J (extended by J xi = 0).  Both must be
    written with jax.numpy so they can be traced and differentiated.
    ``dtheta`` may be supplied analytically; otherwise it is derived.
    """

    dim: int
    domain: tuple
    theta: Callable
    J_full: Callable
    dtheta_fn: Callable | None = None
    derivative_mode: str = ANALYTIC
    fd_step: float = 1e-5
    name: str = "custom"
    ledger: dict = field(default_factory=dict)
    sample_box: tuple | None = None
    tau: Callable | None = None

    def __post_init__(self):
        if self.dim < 3 or self.dim % 2 == 0:
            raise ValueError(f"chart dimension must be odd and >= 3, got {self.dim}")
        lo, hi = (np.asarray(b, dtype=float).reshape(self.dim) for b in self.domain)
        if np.any(hi <= lo):
            raise ValueError("empty chart domain")
        object.__setattr__(self, "domain", (lo, hi))
        if self.sample_box is not None:
            slo, shi = (np.asarray(b, dtype=float).reshape(self.dim) for b in self.sample_box)
            object.__setattr__(self, "sample_box", (slo, shi))
        if self.derivative_mode not in (ANALYTIC, FINITE_DIFFERENCE):
            raise ValueError(f"unknown derivative mode {self.derivative_mode!r}")

    @property
    def m(self) -> int:
        return (self.dim - 1) // 2

    @property
    def tau_mode(self) -> str:
        return "sasakian_zero" if self.tau is None else "user_supplied"

    def contains(self, p, slack=0.0) -> bool:
        p = np.asarray(p, dtype=float)
        lo, hi = self.domain
        return bool(np.all(p >= lo - slack) and np.all(p <= hi + slack))

    def check_point(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.dim:
            raise ValueError(f"expected a point with {self.dim} coordinates, got shape {p.shape}")
        lo, hi = self.domain
        if not (np.all(np.isfinite(p)) and np.all(p >= lo) and np.all(p <= hi)):
            raise ChartBoundary(f"point {np.round(p, 6).tolist()} outside chart '{self.name}'")
        return p

    def derivative(self, f, level=1):
        """Return x -> Jacobian of f at x, in jacfwd layout.

        ``level`` is the nesting depth of the derivative relative to the raw
        fields; it selects the finite-difference step from the ladder.
        """
        if self.derivative_mode == ANALYTIC:
            return jax.jacfwd(f)
        h = self.fd_step * FD_LADDER ** (level - 1)
        if level == 1:
            return central_difference(f, h)
        return richardson_difference(f, h)

    def dtheta(self, x):
        if self.dtheta_fn is not None:
            return self.dtheta_fn(x)
        d = self.derivative(self.theta, 1)(x)  # d[j, i] = d_i theta_j
        return 0.5 * (d.T - d)

    def sample_points(self, n, seed=0):
        lo, hi = self.sample_box if self.sample_box is not None else self.domain
        sob = qmc.Sobol(d=self.dim, scramble=True, seed=seed)
        n = int(n)
        # draw a full power-of-two block (keeps the balance properties) and truncate
        pts = sob.random_base2(max(0, (n - 1).bit_length()))[:n]
        return qmc.scale(pts, lo, hi)

    def ledger_hash(self) -> str:
        payload = json.dumps(_jsonable(self.ledger), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()

    @cached_property
    def structure(self) -> "DerivedStructure":
        return DerivedStructure(self)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


BATCH_LIMIT = 4096


def vectorize(fn, n_point_args=1):
    """Jit fn and dispatch single points or batches (leading axis) to it.

    Returns a callable taking numpy-like inputs and returning numpy arrays.
    """
    single = jax.jit(fn)
    batched = jax.jit(jax.vmap(fn))

    def run_batch(arrs):
        # pad to a power of two so each function compiles for a few shapes only
        B = arrs[0].shape[0]
        size = max(8, 1 << (B - 1).bit_length())
        padded = [np.concatenate([a, np.repeat(a[-1:], size - B, axis=0)]) if size > B else a for a in arrs]
        out = batched(*padded)
        return jax.tree_util.tree_map(lambda o: np.asarray(o)[:B], out)

    def call(*args):
        arrs = [np.asarray(a, dtype=np.float64) for a in args]
        if arrs[0].ndim == 1:
            return jax.tree_util.tree_map(np.asarray, single(*arrs))
        B = arrs[0].shape[0]
        if B == 0:
            raise ValueError("empty batch")
        if B <= BATCH_LIMIT:
            return run_batch(arrs)
        parts = [run_batch([a[s : s + BATCH_LIMIT] for a in arrs]) for s in range(0, B, BATCH_LIMIT)]
        return jax.tree_util.tree_map(lambda *xs: np.concatenate(xs), *parts)

    call.raw = fn
    return call


def reeb_system(theta, D):
    """Stack theta(xi) = 1 and dtheta(xi, .) = 0 into A xi = b."""
    A = jnp.vstack([theta[None, :], D])
    b = jnp.zeros(A.shape[0], dtype=A.dtype).at[0].set(1.0)
    return A, b


def solve_reeb(theta, D):
    # Normal equations (theta theta^T + D^T D) xi = theta: the system is
    # consistent, and an LU solve keeps nested derivatives cheap to trace.
    return jnp.linalg.solve(jnp.outer(theta, theta) + D.T @ D, theta)


class DerivedStructure:
    """Reeb field, Levi form, G_theta, Webster metric and horizontal projector.

    The ``*_fn`` attributes are jnp-traceable; the plain methods take numpy
    points (single or batched) and return numpy arrays.
    """

    def __init__(self, chart: PseudoHermitianChart):
        self.chart = chart
        self.xi = vectorize(self.xi_fn)
        self.levi = vectorize(self.levi_fn)
        self.G_theta = vectorize(self.G_fn)
        self.g_theta = vectorize(self.g_fn)
        self.pi_H = vectorize(self.pi_H_fn)
        self.fields = vectorize(self.fields_fn)

    def xi_fn(self, x):
        return solve_reeb(self.chart.theta(x), self.chart.dtheta(x))

    def pi_H_fn(self, x):
        n = self.chart.dim
        return jnp.eye(n) - jnp.outer(self.xi_fn(x), self.chart.theta(x))

    def levi_fn(self, x):
        return self.chart.dtheta(x) @ self.chart.J_full(x)

    def G_fn(self, x):
        pi = self.pi_H_fn(x)
        G = pi.T @ self.levi_fn(x) @ pi
        return 0.5 * (G + G.T)

    def g_fn(self, x):
        th = self.chart.theta(x)
        return jnp.outer(th, th) + self.G_fn(x)

    def fields_fn(self, x):
        """All pointwise structure in one trace (shared subexpressions)."""
        th = self.chart.theta(x)
        D = self.chart.dtheta(x)
        J = self.chart.J_full(x)
        xi = solve_reeb(th, D)
        n = self.chart.dim
        pi = jnp.eye(n) - jnp.outer(xi, th)
        L = D @ J
        G = pi.T @ L @ pi
        G = 0.5 * (G + G.T)
        g = jnp.outer(th, th) + G
        return dict(theta=th, dtheta=D, J=J, xi=xi, pi_H=pi, levi=L, G=G, g=g)


def _reeb_tolerance(chart):
    return 1e-10 if chart.derivative_mode == ANALYTIC else 1e-6


_reeb_diag_cache: dict = {}


def _reeb_diagnostics(chart):
    fn = _reeb_diag_cache.get(chart)
    if fn is None:

        def diag(x):
            th = chart.theta(x)
            D = chart.dtheta(x)
            A, b = reeb_system(th, D)
            s = jnp.linalg.svd(A, compute_uv=False)
            xi = solve_reeb(th, D)
            return xi, jnp.linalg.norm(A @ xi - b), s

        fn = vectorize(diag)
        _reeb_diag_cache[chart] = fn
    return fn


def compute_reeb(chart: PseudoHermitianChart, p) -> np.ndarray:
    """The unique xi with theta(xi) = 1 and dtheta(xi, .) = 0 at p."""
    p = chart.check_point(p)
    xi, resid, s = _reeb_diagnostics(chart)(p)
    # the stacked system has full column rank exactly when theta ^ dtheta^m != 0
    if s[-1] <= 1e-10 * max(s[0], 1e-300):
        raise SingularStructure(
            f"Reeb system rank deficient at {p.tolist()} (sigma_min/sigma_max = {s[-1] / s[0]:.2e})"
        )
    if resid > _reeb_tolerance(chart):
        raise SingularStructure(f"Reeb system inconsistent at {p.tolist()} (residual {resid:.2e})")
    return xi


def webster_metric(chart: PseudoHermitianChart, p) -> np.ndarray:
    """g_theta = theta (x) theta + L(pi_H ., pi_H .) at p."""
    compute_reeb(chart, p)
    g = chart.structure.g_theta(np.asarray(p, dtype=float))
    w = np.linalg.eigvalsh(g)
    if w[0] <= 0:
        raise NotPositiveDefinite(f"Webster metric has eigenvalue {w[0]:.3e} at {np.asarray(p).tolist()}")
    return g


# ---------------------------------------------------------------------------
# validation


@dataclass
class StructureValidationReport:
    chart: str
    samples: int
    residuals: dict
    tolerances: dict
    flags: list
    passed: bool
    min_metric_eigenvalue: float
    min_reeb_singular_value: float

    def to_dict(self):
        return _jsonable(dataclasses.asdict(self))


STRUCTURE_TOLERANCES = {
    "theta_nonvanishing": 1e-12,
    "dtheta_antisymmetry": 1e-10,
    "J_square": 1e-10,
    "J_xi": 1e-10,
    "reeb_residual": 1e-10,
    "levi_symmetry": 1e-10,
    "metric_xi": 1e-10,
    "J_compatibility": 1e-10,
    "metric_symmetry": 1e-12,
}


def _structure_residuals(chart):
    def res(x):
        th = chart.theta(x)
        D = chart.dtheta(x)
        J = chart.J_full(x)
        n = chart.dim
        A, b = reeb_system(th, D)
        s = jnp.linalg.svd(A, compute_uv=False)
        xi = solve_reeb(th, D)
        pi = jnp.eye(n) - jnp.outer(xi, th)
        L = D @ J
        Lh = pi.T @ L @ pi
        G = 0.5 * (Lh + Lh.T)
        g = jnp.outer(th, th) + G
        nJ = 1.0 + jnp.max(jnp.abs(J))
        nD = 1.0 + jnp.max(jnp.abs(D))
        ng = 1.0 + jnp.max(jnp.abs(g))
        return dict(
            theta_norm=jnp.linalg.norm(th),
            dtheta_antisymmetry=jnp.max(jnp.abs(D + D.T)) / nD,
            J_square=jnp.max(jnp.abs(J @ J @ pi + pi)) / nJ**2,
            J_xi=jnp.linalg.norm(J @ xi) / nJ,
            reeb_residual=jnp.linalg.norm(A @ xi - b) / nD,
            levi_symmetry=jnp.max(jnp.abs(Lh - Lh.T)) / (nD * nJ),
            metric_xi=jnp.max(jnp.abs(g @ xi - th)) / ng,
            J_compatibility=jnp.max(jnp.abs(J.T @ g - D)) / (ng * nJ),
            metric_symmetry=jnp.max(jnp.abs(g - g.T)) / ng,
            min_eig=jnp.linalg.eigvalsh(g)[0] / ng,
            reeb_sigma=s[-1] / s[0],
        )

    return vectorize(res)


_residual_cache: dict = {}


def validate_structure(chart: PseudoHermitianChart, samples: int = 1000, seed: int = 0,
                       tol_scale: float = 1.0) -> StructureValidationReport:
    """Check the structural identities at quasi-random points; never raises."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    fn = _residual_cache.get(chart)
    if fn is None:
        fn = _residual_cache[chart] = _structure_residuals(chart)
    pts = chart.sample_points(samples, seed=seed)
    out = fn(pts)
    fd = chart.derivative_mode != ANALYTIC
    tol = {k: v * tol_scale * (1e4 if fd else 1.0) for k, v in STRUCTURE_TOLERANCES.items()}
    res = {}
    with np.errstate(invalid="ignore"):
        res["theta_nonvanishing"] = float(np.max(np.where(out["theta_norm"] > 0, 0.0, 1.0)))
        for k in ("dtheta_antisymmetry", "J_square", "J_xi", "reeb_residual", "levi_symmetry",
                  "metric_xi", "J_compatibility", "metric_symmetry"):
            v = np.asarray(out[k])
            res[k] = float(np.max(np.where(np.isfinite(v), v, np.inf)))
    min_eig = float(np.min(np.where(np.isfinite(out["min_eig"]), out["min_eig"], -np.inf)))
    min_sigma = float(np.min(np.where(np.isfinite(out["reeb_sigma"]), out["reeb_sigma"], 0.0)))
    flags = []
    if min_sigma < 1e-10:
        flags.append("levi_degenerate")
    if min_eig <= 1e-12:
        flags.append("metric_not_positive")
        if "levi_degenerate" not in flags:
            flags.append("levi_degenerate")
    for k, v in res.items():
        if not v <= tol[k]:
            flags.append(f"{k}_exceeded")
    return StructureValidationReport(
        chart=chart.name,
        samples=int(samples),
        residuals=res,
        tolerances=tol,
        flags=flags,
        passed=not flags,
        min_metric_eigenvalue=min_eig,
        min_reeb_singular_value=min_sigma,
    )


# ---------------------------------------------------------------------------
# JSON chart documents


def chart_from_json(doc: dict | str, name: str | None = None) -> PseudoHermitianChart:
    """Build a chart from the declarative JSON schema.

    Schema::

        {"dim": 3,
         "domain": [[lo...], [hi...]],
         "theta": "heisenberg1" | [poly, poly, ...],
         "J": "heisenberg1" | [[poly, ...], ...],
         "derivative_mode": "analytic" | {"finite_difference": h}}

    where ``poly`` is a number or a list of [coefficient, [exponents...]].
    A builtin name for theta or J borrows that field from the registry.
    """
    if isinstance(doc, str):
        with open(doc) as fh:
            doc = json.load(fh)
    try:
        n = int(doc["dim"])
        theta_spec = doc["theta"]
        J_spec = doc["J"]
    except (KeyError, TypeError) as exc:
        raise PhgeoError(f"malformed chart document: missing {exc}") from exc
    mode = doc.get("derivative_mode", ANALYTIC)
    step = 1e-5
    if isinstance(mode, dict):
        step = float(mode.get(FINITE_DIFFERENCE, step))
        mode = FINITE_DIFFERENCE
    if mode not in (ANALYTIC, FINITE_DIFFERENCE):
        raise PhgeoError(f"unknown derivative_mode {mode!r}")

    base = None
    if isinstance(theta_spec, str) or isinstance(J_spec, str):
        from .builtins import get_manifold

        key = theta_spec if isinstance(theta_spec, str) else J_spec
        base = get_manifold(key)
        if base.dim != n:
            raise PhgeoError(f"builtin {key!r} has dim {base.dim}, document says {n}")

    if isinstance(theta_spec, str):
        theta = base.theta
    else:
        if len(theta_spec) != n:
            raise PhgeoError("theta table must have dim entries")
        polys = [Polynomial.from_json(t, n) for t in theta_spec]

        def theta(x, _p=polys):
            return jnp.stack([q(x) for q in _p])

    if isinstance(J_spec, str):
        J = base.J_full
    else:
        if len(J_spec) != n or any(len(r) != n for r in J_spec):
            raise PhgeoError("J table must be dim x dim")
        polysJ = [[Polynomial.from_json(e, n) for e in row] for row in J_spec]

        def J(x, _p=polysJ):
            return jnp.stack([jnp.stack([q(x) for q in row]) for row in _p])

    if "domain" in doc:
        lo, hi = doc["domain"]
    elif base is not None:
        lo, hi = base.domain
    else:
        lo, hi = [-1.0] * n, [1.0] * n
    return PseudoHermitianChart(
        dim=n,
        domain=(lo, hi),
        theta=theta,
        J_full=J,
        derivative_mode=mode,
        fd_step=step,
        name=name or doc.get("name", "file"),
        ledger={"source": "json", "document": doc},
    )
