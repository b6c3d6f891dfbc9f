"""``phgeo`` command-line front end.

Every subcommand builds an ExperimentReport (tool version, chart, ledger
hash, tolerances, seed) and prints it as a summary or, with --json, as JSON.
Exit codes: 0 all assertions pass, 1 some assertion failed, 2 usage error,
3 the computation itself raised.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, enable_compile_cache
from .builtins import REGISTRY, get_manifold
from .errors import PhgeoError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _vector(text, name="vector"):
    try:
        vals = [float(x) for x in text.replace(" ", "").split(",") if x != ""]
    except ValueError:
        raise UsageError(f"cannot parse {name} {text!r}; expected comma-separated numbers") from None
    if not vals:
        raise UsageError(f"empty {name}")
    return np.array(vals)


def _vector_arg(name):
    def parse(text):
        try:
            return _vector(text, name)
        except UsageError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    return parse


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
        return v

    return parse


def _add_globals(p, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = p.add_argument_group("global options")
    g.add_argument("--manifold", default=d("heisenberg1"),
                   help="builtin chart name (see list-manifolds) or file:path.json (default heisenberg1)")
    g.add_argument("--seed", type=int, default=d(0), help="RNG seed (default 0)")
    g.add_argument("--tol-scale", type=_positive(float), default=d(1.0), dest="tol_scale",
                   help="multiply every upper-bound tolerance by this factor (default 1)")
    g.add_argument("--jobs", type=_positive(int), default=d(1), help="parallel experiment jobs (default 1)")
    g.add_argument("--out-dir", default=d(None), dest="out_dir",
                   help="write report.json and CSV artifacts into this directory")
    g.add_argument("--json", action="store_true", default=d(False), help="print the report as JSON")


def build_parser():
    parser = argparse.ArgumentParser(prog="phgeo", description="Tanaka-Webster geometry experiments on charted "
                                                                "pseudo-Hermitian manifolds.")
    parser.add_argument("--version", action="version", version=f"phgeo {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_globals(p, suppress=True)
        return p

    p = cmd("validate", "Check structure identities and connection axioms at sampled points.")
    p.add_argument("--samples", type=_positive(int), default=1000, help="number of sample points (default 1000)")

    p = cmd("geodesic", "Integrate a nabla-geodesic and report slant/speed drift.")
    p.add_argument("--start", type=_vector_arg("start"), required=True, help="start point, comma separated")
    p.add_argument("--dir", type=_vector_arg("direction"), required=True, help="initial velocity, comma separated")
    p.add_argument("--length", type=_positive(float), required=True, help="parameter length")
    p.add_argument("--step", type=_positive(float), default=None, help="RK4 step (default 1e-2)")
    p.add_argument("--out", choices=("csv", "json"), default=None,
                   help="print the sampled curve (t, x, x', slant, speed) in this format")

    p = cmd("delta", "Upper bound for delta(p, q) over broken nabla-geodesics.")
    p.add_argument("--from", dest="p", type=_vector_arg("from"), required=True, help="point p")
    p.add_argument("--to", dest="q", type=_vector_arg("to"), required=True, help="point q")
    p.add_argument("--segments", type=_positive(int), default=1, help="number of segments k (default 1)")
    p.add_argument("--restarts", type=int, default=2, help="random restarts of the waypoint search (default 2)")
    p.add_argument("--riemannian", action="store_true", help="also compute the Riemannian shooting distance")

    p = cmd("jacobi", "Integrate a Jacobi field along a geodesic.")
    p.add_argument("--start", type=_vector_arg("start"), required=True, help="start point")
    p.add_argument("--dir", type=_vector_arg("direction"), required=True, help="initial velocity")
    p.add_argument("--V0", type=_vector_arg("V0"), required=True, help="V(0)")
    p.add_argument("--V0p", type=_vector_arg("V0p"), required=True, help="nabla V(0)")
    p.add_argument("--length", type=_positive(float), required=True, help="parameter length")
    p.add_argument("--mode", choices=("auto", "general", "sasakian", "split"), default="auto",
                   help="Jacobi equation form (default auto)")
    p.add_argument("--out", choices=("csv", "json"), default=None, help="print the sampled field")

    p = cmd("conjugate", "Search for conjugate points along a geodesic.")
    p.add_argument("--start", type=_vector_arg("start"), required=True, help="start point")
    p.add_argument("--dir", type=_vector_arg("direction"), required=True, help="initial velocity (normalised)")
    p.add_argument("--max-length", dest="max_length", type=_positive(float), required=True,
                   help="search interval length")

    p = cmd("expansion", "Fit the small-t expansion of |d exp(t w)|^2 and compare with its prediction.")
    p.add_argument("--start", type=_vector_arg("start"), required=True, help="base point")
    p.add_argument("--dir", type=_vector_arg("direction"), required=True, help="v (normalised)")
    p.add_argument("--w", type=_vector_arg("w"), required=True, help="w (made unit and orthogonal to v)")

    p = cmd("index", "Compare index forms I(X) >= I(Y) on a conjugate-free segment.")
    p.add_argument("--geodesic", required=True, help="geodesic as 'p:v:L', e.g. '0,0,0:1,0,0:2'")
    p.add_argument("--field", default="random:200",
                   help="'random:N' (N perturbations), 'sine:k:c' (Y + c sin(k pi t/l) E_1) or 'jacobi' (Y only)")
    p.add_argument("--target", default="horizontal",
                   help="Y(l): 'horizontal' (0.8 l times the horizontal part of g'(l)), 'zero' or a vector")
    p.add_argument("--mode", choices=("strict", "remark"), default="strict",
                   help="strict: Y must be a horizontal Jacobi field; remark: any comparison solution")

    p = cmd("bonnet-myers", "First conjugate points along slanted geodesics vs the diameter bound.")
    p.add_argument("--slants", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 0.9],
                   help="comma-separated slants c in [0, 1] (default 0,0.25,0.5,0.75,0.9)")
    p.add_argument("--k0", type=_positive(float), default=None,
                   help="curvature lower bound (default: measured minimum of K^H minus 1e-6)")

    p = cmd("cartan-hadamard", "Conjugate search over quasi-random directions (expects none when K^H <= 0).")
    p.add_argument("--dirs", type=_positive(int), default=64, help="number of directions (default 64)")
    p.add_argument("--max-length", dest="max_length", type=_positive(float), default=20.0,
                   help="search length (default 20)")
    p.add_argument("--expect", choices=("none", "some"), default="none",
                   help="'none' asserts zero conjugate points, 'some' asserts at least one (default none)")

    p = cmd("paper-suite", "Run the full verification battery.")
    p.add_argument("--config", default=None, help="JSON config file (charts, seed, tol_scale, tolerances, sizes)")
    p.add_argument("--filter", action="append", default=None,
                   help="run only this experiment (repeatable)")

    cmd("list-manifolds", "List builtin charts.")
    return parser


# ---------------------------------------------------------------------------


def _conn(args):
    from .connection import connection_for

    try:
        chart = get_manifold(args.manifold)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load manifold {args.manifold!r}: {exc}") from None
    except PhgeoError as exc:
        raise UsageError(str(exc)) from None
    return connection_for(chart)


def _dim(conn, *vecs):
    for name, v in vecs:
        if len(v) != conn.n:
            raise UsageError(f"{name} has {len(v)} components; manifold '{conn.chart.name}' has dimension {conn.n}")


def _report(args, conn, experiment, **params):
    from .report import ExperimentReport

    return ExperimentReport(experiment, conn.chart.name, conn.chart.ledger_hash(), params, seed=args.seed)


def _unit(conn, p, v):
    g = conn.structure.g_theta(p)
    s = float(np.sqrt(v @ g @ v))
    if s == 0:
        raise UsageError("direction must be nonzero")
    return v / s


def run_validate(args):
    from .chart import validate_structure

    conn = _conn(args)
    rep = _report(args, conn, "validate", samples=args.samples)
    sv = validate_structure(conn.chart, samples=args.samples, seed=args.seed)
    tol = 1e-7 * args.tol_scale
    rep.parameters["tolerances"] = {"structure": tol, "axioms": tol}
    for k, v in sv.residuals.items():
        rep.check(f"structure.{k}", v, tol)
    for k, v in conn.axiom_residuals(samples=args.samples, seed=args.seed).items():
        rep.check(f"axiom.{k}", v, tol)
    rep.data["structure"] = sv.to_dict()
    return rep


def run_geodesic(args):
    from .geodesics import DEFAULT_STEP, integrate_geodesic

    conn = _conn(args)
    _dim(conn, ("--start", args.start), ("--dir", args.dir))
    h = args.step or DEFAULT_STEP
    path = integrate_geodesic(conn, args.start, args.dir, args.length, h=h)
    tol = 1e-7 * args.tol_scale
    rep = _report(args, conn, "geodesic", start=args.start, direction=args.dir, length=args.length, step=h,
                  tolerances={"drift": tol})
    sl, sp = path.slants(), path.speed()
    rep.check("slant_drift", float(np.ptp(sl)), tol)
    rep.check("speed_drift", float(np.ptp(sp)), tol * max(1.0, float(sp[0])))
    rep.data.update(endpoint=path.x[-1], slant=float(sl[0]), speed=float(sp[0]), step_used=path.h,
                    error_estimate=path.error_estimate)
    n = conn.n
    cols = ["t"] + [f"x{i}" for i in range(n)] + [f"v{i}" for i in range(n)] + ["slant", "speed"]
    table = np.column_stack([path.t, path.x, path.u, sl, sp])
    return rep, (cols, table)


def run_delta(args):
    from .geodesics import delta_upper_bound, riemannian_distance

    conn = _conn(args)
    _dim(conn, ("--from", args.p), ("--to", args.q))
    rep = _report(args, conn, "delta", p=args.p, q=args.q, segments=args.segments, restarts=args.restarts)
    val, broken = delta_upper_bound(conn, args.p, args.q, segments=args.segments, restarts=args.restarts,
                                    seed=args.seed)
    rep.data.update(delta_upper_bound=val, segment_lengths=[s.length for s in broken.segments],
                    waypoints=[s.x[0] for s in broken.segments[1:]])
    rep.check("endpoint_mismatch", broken.endpoint_mismatch(), 1e-6 * args.tol_scale)
    if args.riemannian:
        d = riemannian_distance(conn, args.p, args.q, seed=args.seed)
        rep.data["riemannian_distance"] = d
        rep.check("d_minus_delta", d - val, 1e-8 * args.tol_scale, "<=")
    return rep


def run_jacobi(args):
    from .geodesics import integrate_geodesic
    from .jacobi import integrate_jacobi

    conn = _conn(args)
    _dim(conn, ("--start", args.start), ("--dir", args.dir), ("--V0", args.V0), ("--V0p", args.V0p))
    path = integrate_geodesic(conn, args.start, args.dir, args.length)
    sol = integrate_jacobi(conn, path, args.V0, args.V0p, mode=args.mode)
    rep = _report(args, conn, "jacobi", start=args.start, direction=args.dir, V0=args.V0, V0p=args.V0p,
                  length=args.length, mode=sol.mode)
    rep.data.update(V_end=sol.V[-1], nablaV_end=sol.P[-1], error_estimate=sol.error_estimate)
    if sol.mode in ("sasakian", "split"):
        q = sol.conserved_quantity()
        tol = 1e-6 * args.tol_scale
        rep.parameters["tolerances"] = {"conservation": tol}
        rep.check("conservation_spread", float(np.ptp(q)), tol)
    else:
        rep.check("error_estimate", sol.error_estimate, 1e-6 * args.tol_scale)
    n = conn.n
    cols = ["t"] + [f"V{i}" for i in range(n)] + [f"dV{i}" for i in range(n)]
    return rep, (cols, np.column_stack([sol.t, sol.V, sol.P]))


def run_conjugate(args):
    from .jacobi import conjugate_search

    conn = _conn(args)
    _dim(conn, ("--start", args.start), ("--dir", args.dir))
    v = _unit(conn, args.start, args.dir)
    res = conjugate_search(conn, args.start, v, args.max_length)
    rep = _report(args, conn, "conjugate", start=args.start, direction=v, max_length=args.max_length)
    rep.data.update(
        first=res.first,
        points=[{"t": q.t, "multiplicity": q.multiplicity, "sigma_ratio": q.sigma_ratio, "kind": q.kind}
                for q in res.points],
        partial=res.partial, t_exit=res.t_exit,
        sigma_trace={"t": res.t, "sigma_ratio": res.sigma_ratio},
    )
    rep.check("searched_to_max_length", int(not res.partial), 0.5, ">")
    return rep


def run_expansion(args):
    from .jacobi import taylor_expansion_check

    conn = _conn(args)
    _dim(conn, ("--start", args.start), ("--dir", args.dir), ("--w", args.w))
    p = args.start
    v = _unit(conn, p, args.dir)
    g = conn.structure.g_theta(p)
    w = args.w - (args.w @ g @ v) * v
    if np.sqrt(w @ g @ w) < 1e-12:
        raise UsageError("w must not be parallel to v")
    w = w / np.sqrt(w @ g @ w)
    r = taylor_expansion_check(conn, p, v, w)
    tol = {"c2": 1e-6 * args.tol_scale, "c3": 1e-4 * args.tol_scale, "c4_relative": 1e-3 * args.tol_scale}
    rep = _report(args, conn, "expansion", start=p, v=v, w=w, tolerances=tol)
    rep.check("c2_error", r["residuals"]["c2"], tol["c2"])
    rep.check("c3_error", r["residuals"]["c3"], tol["c3"])
    rep.check("c4_relative_error", r["residuals"]["c4"] / max(1.0, abs(r["predicted"]["c4"])), tol["c4_relative"])
    rep.data.update({k: r[k] for k in ("fitted", "predicted", "residuals")})
    return rep


def _parse_geodesic(conn, text):
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError("--geodesic must look like 'p:v:L'")
    p, v = _vector(parts[0], "geodesic start"), _vector(parts[1], "geodesic direction")
    _dim(conn, ("geodesic start", p), ("geodesic direction", v))
    try:
        L = float(parts[2])
    except ValueError:
        raise UsageError(f"bad geodesic length {parts[2]!r}") from None
    if not L > 0:
        raise UsageError("geodesic length must be positive")
    return p, _unit(conn, p, v), L


def run_index(args):
    from .geodesics import integrate_geodesic
    from .variational import INDEX_STEP, index_comparison, index_form

    conn = _conn(args)
    p, v, L = _parse_geodesic(conn, args.geodesic)
    path = integrate_geodesic(conn, p, v, L, h=INDEX_STEP)
    if args.target == "zero":
        target = None
    elif args.target == "horizontal":
        c = path.slant
        s = np.sqrt(max(0.0, 1 - c * c))
        if s < 1e-9:
            raise UsageError("a vertical geodesic has no horizontal tangent target; use --target zero")
        target = 0.8 * L * (path.u[-1] - c * path.xi[-1]) / s
    else:
        target = _vector(args.target, "target")
        _dim(conn, ("--target", target))
    kind, _, rest = args.field.partition(":")
    if kind == "random":
        trials = int(rest or 200)
    elif kind in ("sine", "jacobi"):
        trials = 0
    else:
        raise UsageError(f"unknown --field {args.field!r}")
    tol = {"gap": 1e-7 * args.tol_scale, "identity": 1e-6 * args.tol_scale, "reciprocity": 1e-7 * args.tol_scale}
    rep = _report(args, conn, "index", geodesic=args.geodesic, field=args.field, target=target, mode=args.mode,
                  tolerances=tol)
    r = index_comparison(conn, path, target=target, trials=trials, seed=args.seed, mode=args.mode)
    rep.data.update(r.to_dict())
    if kind == "sine":
        bits = rest.split(":")
        try:
            k, amp = int(bits[0]), float(bits[1])
        except (ValueError, IndexError):
            raise UsageError("--field sine needs 'sine:k:c'") from None
        from .jacobi import integrate_jacobi_fields
        from .connection import orthonormal_frame

        n = conn.n
        E0 = orthonormal_frame(path.g[0], path.xi[0])
        Vs, Ps = integrate_jacobi_fields(conn, path, np.zeros((n, n)), E0, "comparison")
        tgt = np.zeros(n) if target is None else target
        cc = np.linalg.solve(Vs[-1], tgt)
        Y, dY = Vs @ cc, Ps @ cc
        E1 = path.E[:, :, 1]
        w = k * np.pi / L
        X = Y + amp * np.sin(w * path.t)[:, None] * E1
        dX = dY + amp * w * np.cos(w * path.t)[:, None] * E1
        gap = index_form(conn, path, X, dX).value - r.I_Y
        rep.data["I_X_minus_I_Y"] = gap
        rep.check("gap", gap, -tol["gap"], ">=")
    elif kind == "random":
        rep.check("min_gap", r.min_gap, -tol["gap"], ">=")
        rep.check("equality_violations", r.equality_violations, 0.5)
    rep.check("identity_residual", r.identity_residual, tol["identity"])
    rep.check("reciprocity", r.reciprocity, tol["reciprocity"])
    return rep


def run_bonnet_myers(args):
    from .variational import bonnet_myers_experiment

    conn = _conn(args)
    slack = 1e-3 * args.tol_scale
    mode = "given" if args.k0 is not None else "measured"
    rep = _report(args, conn, "bonnet-myers", slants=args.slants, k0_mode=mode, tolerances={"slack": slack})
    r = bonnet_myers_experiment(conn, slants=args.slants, k0_mode=mode, k0=args.k0, seed=args.seed, slack=slack)
    for row in r["rows"]:
        if row["t_star"] is not None:
            rep.check(f"excess_over_bound[c={row['slant']:g}]", row["t_star"] - row["bound"], slack, "<=")
        elif row["status"] != "NoConjugateExpected":
            rep.check(f"found[c={row['slant']:g}]", 0, 0.5, ">")
    rep.check("monotone", int(r["monotone"]), 0.5, ">")
    rep.data.update(r)
    return rep


def run_cartan_hadamard(args):
    from .variational import cartan_hadamard_sweep

    conn = _conn(args)
    rep = _report(args, conn, "cartan-hadamard", directions=args.dirs, max_length=args.max_length,
                  expect=args.expect)
    r = cartan_hadamard_sweep(conn, directions=args.dirs, L_max=args.max_length, seed=args.seed)
    if args.expect == "none":
        rep.check("conjugate_points", r["count"], 0.5)
    else:
        rep.check("conjugate_points", r["count"], 0.5, ">")
    rep.data.update(r)
    return rep


def run_list(args):
    rows = []
    for name, e in REGISTRY.items():
        rows.append({"name": name, "description": e.description, "sasakian": e.sasakian})
    if args.json:
        print(json.dumps({"version": __version__, "manifolds": rows}, indent=2, sort_keys=True))
    else:
        for r in rows:
            print(f"{r['name']:14s} {r['description']}")
    return EXIT_OK


def run_suite(args):
    from .suite import ConfigError, run_paper_suite
    from .report import dump_reports

    def progress(r):
        if not args.json:
            print(r.summary_line() + f"  ({r.wall_time:.1f}s)", flush=True)

    try:
        reports = run_paper_suite(args.config, filter=args.filter, tol_scale=args.tol_scale, jobs=args.jobs,
                                  out_dir=args.out_dir, seed=args.seed, progress=progress)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    ok = all(r.passed for r in reports)
    if args.json:
        print(dump_reports(reports))
    else:
        n_pass = sum(r.passed for r in reports)
        print(f"{n_pass}/{len(reports)} reports passed" + (f"; artifacts in {args.out_dir}" if args.out_dir else ""))
    return EXIT_OK if ok else EXIT_FAIL


HANDLERS = {
    "validate": run_validate,
    "geodesic": run_geodesic,
    "delta": run_delta,
    "jacobi": run_jacobi,
    "conjugate": run_conjugate,
    "expansion": run_expansion,
    "index": run_index,
    "bonnet-myers": run_bonnet_myers,
    "cartan-hadamard": run_cartan_hadamard,
}


def _emit(args, rep, table=None):
    from .report import table_csv
    from .suite import write_reports

    if args.out_dir:
        write_reports([rep], args.out_dir)
        if table is not None:
            cols, arr = table
            with open(os.path.join(args.out_dir, f"{rep.experiment}__samples.csv"), "w") as fh:
                fh.write(table_csv([dict(zip(cols, row)) for row in arr], cols))
    out = getattr(args, "out", None)
    if table is not None and out == "csv":
        cols, arr = table
        print(table_csv([dict(zip(cols, row)) for row in arr], cols), end="")
    elif table is not None and out == "json":
        cols, arr = table
        d = rep.to_dict()
        d["data"]["samples"] = {c: arr[:, i].tolist() for i, c in enumerate(cols)}
        print(json.dumps(d, indent=2, sort_keys=True))
    elif args.json:
        print(rep.to_json())
    else:
        print(rep.summary_line())
        for a in rep.assertions:
            print(f"  {a.name}: {a.value!r} {a.relation} {a.tolerance:g}  {'ok' if a.passed else 'FAIL'}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    enable_compile_cache()
    try:
        if args.command == "list-manifolds":
            return run_list(args)
        if args.command == "paper-suite":
            return run_suite(args)
        import time

        t0 = time.perf_counter()
        out = HANDLERS[args.command](args)
        rep, table = out if isinstance(out, tuple) else (out, None)
        rep.parameters.setdefault("tol_scale", args.tol_scale)
        rep.wall_time = time.perf_counter() - t0
        _emit(args, rep, table)
        return EXIT_OK if rep.passed else EXIT_FAIL
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"phgeo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PhgeoError as exc:
        print(f"phgeo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
