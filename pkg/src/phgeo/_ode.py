"""Chunked, batched RK4 kernels.

Every integrator in the package funnels through ``run_rk4``: an autonomous
right-hand side on a pytree state is stepped with classical RK4 inside a
``lax.scan`` of fixed length, vmapped over a (padded) batch.  The step
size and the number of active steps are traced arguments, so one compiled
kernel serves every length and resolution.
"""

from __future__ import annotations

from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

CHUNK = 64
BUCKETS = (1, 8, 32, 64, 128)


def _axpy(a, x, y):
    return jax.tree_util.tree_map(lambda xi, yi: yi + a * xi, x, y)


_NODES = np.array([0.0, 0.5, 0.5, 1.0])
_WEIGHTS = np.array([1.0, 2.0, 2.0, 1.0]) / 6.0


def rk4_step(rhs, y, h):
    # Stages run inside a scan so the right-hand side is traced only once.
    def stage(carry, cw):
        acc, k = carry
        c, w = cw
        k = rhs(_axpy(c * h, k, y))
        return (_axpy(w * h, k, acc), k), None

    zero = jax.tree_util.tree_map(jnp.zeros_like, y)
    (out, _), _ = lax.scan(stage, (y, zero), (jnp.asarray(_NODES), jnp.asarray(_WEIGHTS)))
    return out


def make_kernel(rhs):
    """Compile-once chunk runner: (y0[B], h[B], n_active[B], substeps) -> (y_end, ys)."""

    def chunk(y0, h, n_active, substeps):
        hs = h / substeps.astype(h.dtype)

        def body(y, i):
            ynew = lax.fori_loop(0, substeps, lambda _, z: rk4_step(rhs, z, hs), y)
            y = jax.tree_util.tree_map(lambda a, b: jnp.where(i < n_active, a, b), ynew, y)
            return y, y

        return lax.scan(body, y0, jnp.arange(CHUNK))

    return jax.jit(jax.vmap(chunk, in_axes=(0, 0, 0, None)))


def _bucket(b):
    for s in BUCKETS:
        if b <= s:
            return s
    return BUCKETS[-1]


def _pad(tree, size):
    def pad(a):
        a = np.asarray(a)
        if a.shape[0] == size:
            return a
        reps = np.repeat(a[:1], size - a.shape[0], axis=0)
        return np.concatenate([a, reps], axis=0)

    return jax.tree_util.tree_map(pad, tree)


def run_rk4(kernel, y0, h, nsteps, substeps=1, position=None, box=None):
    """Integrate a batch and return stacked samples.

    y0: pytree with leading batch axis B.  h, nsteps: arrays of shape (B,).
    Returns (samples, exit_index) where samples leaves have shape
    (B, max(nsteps) + 1, ...) and exit_index[b] is the first sample index
    outside ``box`` (or -1).  Integration of a trajectory stops being
    meaningful after it exits; its later samples are left as computed.
    """
    leaves = jax.tree_util.tree_leaves(y0)
    B = leaves[0].shape[0]
    h = np.broadcast_to(np.asarray(h, dtype=float), (B,))
    nsteps = np.broadcast_to(np.asarray(nsteps, dtype=int), (B,))
    maxB = BUCKETS[-1]
    if B > maxB:
        parts = []
        exits = []
        for s in range(0, B, maxB):
            sl = slice(s, s + maxB)
            sub = jax.tree_util.tree_map(lambda a: np.asarray(a)[sl], y0)
            smp, ex = run_rk4(kernel, sub, h[sl], nsteps[sl], substeps, position, box)
            parts.append(smp)
            exits.append(ex)
        nmax = int(nsteps.max()) + 1
        samples = jax.tree_util.tree_map(
            lambda *xs: np.concatenate([x[:, :nmax] if x.shape[1] >= nmax else _extend(x, nmax) for x in xs]),
            *parts,
        )
        return samples, np.concatenate(exits)

    size = _bucket(B)
    y = _pad(y0, size)
    hh = _pad(h, size)
    ns = _pad(nsteps, size)
    total = int(nsteps.max())
    nchunks = max(1, -(-total // CHUNK))
    out = [jax.tree_util.tree_map(lambda a: np.asarray(a)[:, None], y)]
    exit_idx = np.full(B, -1)
    y = jax.tree_util.tree_map(jnp.asarray, y)
    done = 0
    for c in range(nchunks):
        active = np.clip(ns - done, 0, CHUNK)
        y, ys = kernel(y, jnp.asarray(hh), jnp.asarray(active), jnp.asarray(substeps, dtype=jnp.int32))
        ys = jax.tree_util.tree_map(np.asarray, ys)
        out.append(ys)
        done += CHUNK
        if position is not None and box is not None:
            pos = position(ys)[:B]
            lo, hi = box
            bad = ~(np.all((pos >= lo) & (pos <= hi), axis=-1))
            bad &= (np.arange(CHUNK)[None, :] + done - CHUNK + 1) <= nsteps[:, None]
            for b in np.nonzero(bad.any(axis=1))[0]:
                if exit_idx[b] < 0:
                    exit_idx[b] = done - CHUNK + 1 + int(np.argmax(bad[b]))
            finished = (exit_idx >= 0) | (nsteps <= done)
            if finished.all():
                break
    samples = jax.tree_util.tree_map(lambda *xs: np.concatenate(xs, axis=1)[:B, : total + 1], *out)
    return samples, exit_idx


def _extend(x, n):
    pad = np.repeat(x[:, -1:], n - x.shape[1], axis=1)
    return np.concatenate([x, pad], axis=1)


def richardson_error(coarse, fine, scale_floor=1.0):
    """Half-step error estimate |y_h - y_{h/2}| / 15, relative to max(1, |y|)."""
    errs = []
    for a, b in zip(jax.tree_util.tree_leaves(coarse), jax.tree_util.tree_leaves(fine)):
        a = np.asarray(a)
        b = np.asarray(b)
        B = a.shape[0]
        d = np.abs(a - b).reshape(B, a.shape[1], -1)
        s = np.maximum(scale_floor, np.abs(b).reshape(B, b.shape[1], -1).max(axis=2, keepdims=True))
        errs.append(np.nanmax(d / s, axis=(1, 2)) / 15.0)
    return np.max(np.stack(errs), axis=0)


# ---------------------------------------------------------------------------
# right-hand sides


def geodesic_rhs(gamma_fn):
    def rhs(y):
        x, u, E = y["x"], y["u"], y["E"]
        G = gamma_fn(x)
        return {
            "x": u,
            "u": -jnp.einsum("kij,i,j->k", G, u, u),
            "E": -jnp.einsum("kij,i,ja->ka", G, u, E),
        }

    return rhs


def jacobi_rhs(conn, mode):
    """Jacobi system in (V, P = nabla_{gamma'} V) form for k fields at once.

    Modes: "sasakian", "comparison", "general".
    """
    st = conn.structure
    sign = conn.calibrate()[0]

    def rhs(y):
        x, u, V, P = y["x"], y["u"], y["V"], y["P"]
        G = conn.gamma_fn(x)
        R = sign * conn.riemann_fn(x)
        Ru = jnp.einsum("lkij,i,k->lj", R, u, u)  # V -> R(u, V) u
        F = Ru @ V
        if mode == "sasakian":
            f = st.fields_fn(x)
            Ju = f["J"] @ u
            F = F + 2.0 * jnp.outer(f["xi"], (Ju @ f["g"]) @ P)
        elif mode == "general":
            f = st.fields_fn(x)
            th, xi, D = f["theta"], f["xi"], f["dtheta"]
            tau = conn.tau_fn(x)
            ntau = jnp.einsum("i,ikj->kj", u, conn.nabla_tau_fn(x))
            F = (
                F
                + 2.0 * jnp.outer(xi, u @ D @ P)
                + (th @ u) * (ntau @ V + tau @ P)
                - jnp.outer(tau @ u, th @ P)
                - jnp.outer(ntau @ u, th @ V)
            )
        elif mode != "comparison":
            raise ValueError(mode)
        return {
            "x": u,
            "u": -jnp.einsum("kij,i,j->k", G, u, u),
            "V": P - jnp.einsum("kij,i,ja->ka", G, u, V),
            "P": F - jnp.einsum("kij,i,ja->ka", G, u, P),
        }

    return rhs


def curve_transport_rhs(gamma_fn, curve):
    """nabla_{c'} W = 0 along a jnp-traceable curve c(s); state carries s."""

    def rhs(y):
        s = y["s"]
        x, v = jax.jvp(curve, (s,), (jnp.ones_like(s),))
        G = gamma_fn(x)
        return {"s": jnp.ones_like(s), "W": -jnp.einsum("kij,i,ja->ka", G, v, y["W"])}

    return rhs


def kernel_for(conn, kind, *extra):
    """Per-connection kernel cache."""
    cache = conn.__dict__.setdefault("_kernels", {})
    key = (kind,) + extra
    k = cache.get(key)
    if k is None:
        if kind == "geodesic":
            k = make_kernel(geodesic_rhs(conn.gamma_fn))
        elif kind == "jacobi":
            k = make_kernel(jacobi_rhs(conn, extra[0]))
        elif kind == "curve":
            k = make_kernel(curve_transport_rhs(conn.gamma_fn, extra[0]))
        else:
            raise ValueError(kind)
        cache[key] = k
    return k
