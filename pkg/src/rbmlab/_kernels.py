"""Compiled step kernels: per-step batches and whole-path loops.

They fuse exponential step, projection and frame transport for a batch of
paths.  The vectorised numpy methods on the geometry classes remain the
reference implementation; tests check both agree.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True)
def disk_step(x, xi, radius, band, x_out, push_out):
    """Returns the largest overshoot seen (for the reach guard)."""
    worst = 0.0
    for p in range(x.shape[0]):
        y0 = x[p, 0] + xi[p, 0]
        y1 = x[p, 1] + xi[p, 1]
        r = math.sqrt(y0 * y0 + y1 * y1)
        if r > radius:
            s = radius / r
            x_out[p, 0] = y0 * s
            x_out[p, 1] = y1 * s
            push_out[p] = r - radius
            if r - radius > worst:
                worst = r - radius
        else:
            x_out[p, 0] = y0
            x_out[p, 1] = y1
            push_out[p] = 0.0
    return worst


@nb.njit(cache=True, nogil=True, inline="always")
def _hemisphere_move(a0, a1, a2, u00, u01, u10, u11, u20, u21, xi0, xi1):
    """One geodesic step, equator projection and transport for a single path.

    Returns ``(y0, y1, y2, u00, u01, u10, u11, u20, u21, push, ok)``.
    """
    v0 = u00 * xi0 + u01 * xi1
    v1 = u10 * xi0 + u11 * xi1
    v2 = u20 * xi0 + u21 * xi1
    s = math.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
    if s > 0.5 * math.pi:
        return a0, a1, a2, u00, u01, u10, u11, u20, u21, 0.0, False
    c = math.cos(s)
    sn = math.sin(s) / s if s > 0.0 else 1.0
    y0 = c * a0 + sn * v0
    y1 = c * a1 + sn * v1
    y2 = c * a2 + sn * v2
    nrm = math.sqrt(y0 * y0 + y1 * y1 + y2 * y2)
    y0 /= nrm
    y1 /= nrm
    y2 /= nrm
    push = 0.0
    if y2 < 0.0:
        push = math.asin(min(1.0, -y2))
        rr = math.sqrt(y0 * y0 + y1 * y1)
        if rr < 1e-12:
            return a0, a1, a2, u00, u01, u10, u11, u20, u21, 0.0, False
        y0 /= rr
        y1 /= rr
        y2 = 0.0
    # rotation about k = a x b taking a to b
    k0 = a1 * y2 - a2 * y1
    k1 = a2 * y0 - a0 * y2
    k2 = a0 * y1 - a1 * y0
    cab = a0 * y0 + a1 * y1 + a2 * y2
    if cab < -1.0 + 1e-9:
        return a0, a1, a2, u00, u01, u10, u11, u20, u21, 0.0, False
    inv = 1.0 / (1.0 + cab)
    kw0 = k1 * u20 - k2 * u10
    kw1 = k2 * u00 - k0 * u20
    kw2 = k0 * u10 - k1 * u00
    n00 = u00 + kw0 + (k1 * kw2 - k2 * kw1) * inv
    n10 = u10 + kw1 + (k2 * kw0 - k0 * kw2) * inv
    n20 = u20 + kw2 + (k0 * kw1 - k1 * kw0) * inv
    kw0 = k1 * u21 - k2 * u11
    kw1 = k2 * u01 - k0 * u21
    kw2 = k0 * u11 - k1 * u01
    n01 = u01 + kw0 + (k1 * kw2 - k2 * kw1) * inv
    n11 = u11 + kw1 + (k2 * kw0 - k0 * kw2) * inv
    n21 = u21 + kw2 + (k0 * kw1 - k1 * kw0) * inv
    return y0, y1, y2, n00, n01, n10, n11, n20, n21, push, True


@nb.njit(cache=True, nogil=True)
def hemisphere_step(x, u, xi, x_out, u_out, push_out):
    """Geodesic step, equator projection and parallel transport for a batch.

    Returns the largest overshoot (geodesic distance below the equator),
    or ``inf`` for a degenerate step.
    """
    worst = 0.0
    for p in range(x.shape[0]):
        r = _hemisphere_move(
            x[p, 0], x[p, 1], x[p, 2],
            u[p, 0, 0], u[p, 0, 1], u[p, 1, 0], u[p, 1, 1], u[p, 2, 0], u[p, 2, 1],
            xi[p, 0], xi[p, 1],
        )
        if not r[10]:
            return math.inf
        x_out[p, 0], x_out[p, 1], x_out[p, 2] = r[0], r[1], r[2]
        u_out[p, 0, 0], u_out[p, 0, 1] = r[3], r[4]
        u_out[p, 1, 0], u_out[p, 1, 1] = r[5], r[6]
        u_out[p, 2, 0], u_out[p, 2, 1] = r[7], r[8]
        push_out[p] = r[9]
        if r[9] > worst:
            worst = r[9]
    return worst


# adapted drift modes evaluated inside the whole-path loops:
# hdot_k = g(x_k[coord]) e_slot with g = tanh(param * .) or sgn(. - param)
DRIFT_NONE = 0
DRIFT_TANH = 1
DRIFT_SGN = 2


@nb.njit(cache=True, nogil=True, inline="always")
def _adapted(mode, param, v):
    if mode == DRIFT_TANH:
        return math.tanh(param * v)
    if mode == DRIFT_SGN:
        return 1.0 if v >= param else -1.0
    return 0.0


@nb.njit(cache=True, nogil=True)
def reflect_paths_1d(x0, sign, db, lo, hi, band, mode, param, eps, dt, xs_out, dl_out):
    """Whole-path projection scheme on ``[lo, hi]`` (``hi`` may be ``inf``).

    ``sign`` is the frame ``u = (+-1)`` and the frame-coordinate step is
    ``db + (eps g(x)) dt``.  Returns the largest overshoot.
    """
    worst = 0.0
    for p in range(db.shape[0]):
        x = x0[p]
        s = sign[p]
        xs_out[p, 0] = x
        for k in range(db.shape[1]):
            xi = db[p, k]
            if mode != DRIFT_NONE:
                xi = xi + (eps * _adapted(mode, param, x)) * dt
            y = x + s * xi
            push = 0.0
            if y < lo:
                push = lo - y
                y = lo
            elif y > hi:
                push = y - hi
                y = hi
            if push > worst:
                worst = push
            x = y
            xs_out[p, k + 1] = x
            dl_out[p, k] = push
        if worst > band:
            return worst
    return worst


@nb.njit(cache=True, nogil=True)
def disk_paths(x0, u0, db, radius, band, mode, param, coord, slot, eps, dt, xs_out, dl_out):
    """Whole-path scheme on the disk with a fixed frame; returns the largest overshoot."""
    worst = 0.0
    for p in range(db.shape[0]):
        a0 = x0[p, 0]
        a1 = x0[p, 1]
        xs_out[p, 0, 0] = a0
        xs_out[p, 0, 1] = a1
        for k in range(db.shape[1]):
            xi0 = db[p, k, 0]
            xi1 = db[p, k, 1]
            if mode != DRIFT_NONE:
                g = (eps * _adapted(mode, param, a0 if coord == 0 else a1)) * dt
                if slot == 0:
                    xi0 = xi0 + g
                else:
                    xi1 = xi1 + g
            y0 = a0 + (u0[p, 0, 0] * xi0 + u0[p, 0, 1] * xi1)
            y1 = a1 + (u0[p, 1, 0] * xi0 + u0[p, 1, 1] * xi1)
            r = math.sqrt(y0 * y0 + y1 * y1)
            push = 0.0
            if r > radius:
                f = radius / r
                y0 *= f
                y1 *= f
                push = r - radius
                if push > worst:
                    worst = push
            a0 = y0
            a1 = y1
            xs_out[p, k + 1, 0] = a0
            xs_out[p, k + 1, 1] = a1
            dl_out[p, k] = push
        if worst > band:
            return worst
    return worst


@nb.njit(cache=True, nogil=True)
def _gram_schmidt_tangent(x, u):
    """Project the frame columns onto ``x^perp`` and orthonormalise in place."""
    for j in range(2):
        d = x[0] * u[0, j] + x[1] * u[1, j] + x[2] * u[2, j]
        for a in range(3):
            u[a, j] -= d * x[a]
        for i in range(j):
            c = u[0, i] * u[0, j] + u[1, i] * u[1, j] + u[2, i] * u[2, j]
            for a in range(3):
                u[a, j] -= c * u[a, i]
        n = math.sqrt(u[0, j] * u[0, j] + u[1, j] * u[1, j] + u[2, j] * u[2, j])
        for a in range(3):
            u[a, j] /= n


@nb.njit(cache=True, nogil=True)
def hemisphere_paths(x0, u0, db, band, reorth_every, mode, param, coord, slot, eps, dt, xs_out, us_out, dl_out):
    """Whole-path scheme on the hemisphere with parallel-transported frames.

    Frames are re-orthonormalised every ``reorth_every`` steps.  Returns the
    largest overshoot or ``inf`` for a degenerate step.
    """
    worst = 0.0
    for p in range(db.shape[0]):
        xs_out[p, 0] = x0[p]
        us_out[p, 0] = u0[p]
        a0, a1, a2 = x0[p, 0], x0[p, 1], x0[p, 2]
        u00, u01, u10, u11, u20, u21 = u0[p, 0, 0], u0[p, 0, 1], u0[p, 1, 0], u0[p, 1, 1], u0[p, 2, 0], u0[p, 2, 1]
        for k in range(db.shape[1]):
            xi0 = db[p, k, 0]
            xi1 = db[p, k, 1]
            if mode != DRIFT_NONE:
                g = (eps * _adapted(mode, param, a0 if coord == 0 else (a1 if coord == 1 else a2))) * dt
                if slot == 0:
                    xi0 = xi0 + g
                else:
                    xi1 = xi1 + g
            a0, a1, a2, u00, u01, u10, u11, u20, u21, push, ok = _hemisphere_move(a0, a1, a2, u00, u01, u10, u11, u20, u21, xi0, xi1)
            if not ok:
                return math.inf
            if push > worst:
                worst = push
                if worst > band:
                    return worst
            xs_out[p, k + 1, 0] = a0
            xs_out[p, k + 1, 1] = a1
            xs_out[p, k + 1, 2] = a2
            us_out[p, k + 1, 0, 0] = u00
            us_out[p, k + 1, 0, 1] = u01
            us_out[p, k + 1, 1, 0] = u10
            us_out[p, k + 1, 1, 1] = u11
            us_out[p, k + 1, 2, 0] = u20
            us_out[p, k + 1, 2, 1] = u21
            if (k + 1) % reorth_every == 0:
                un = us_out[p, k + 1]
                _gram_schmidt_tangent(xs_out[p, k + 1], un)
                u00, u01, u10, u11, u20, u21 = un[0, 0], un[0, 1], un[1, 0], un[1, 1], un[2, 0], un[2, 1]
            dl_out[p, k] = push
    return worst


@nb.njit(cache=True, nogil=True)
def backward_matvec(factors, nodes, vecs, base, out):
    """``g_j = A_j (g_{j+1} + v_{j+1})`` from the last step down; ``vecs[p, i]`` sits at ``nodes[i]``."""
    P, m, d, _ = factors.shape
    cur = np.zeros(d)
    tmp = np.zeros(d)
    for p in range(P):
        cur[:] = 0.0
        i = len(nodes) - 1
        for j in range(m - 1, -1, -1):
            node = base + j + 1
            while i >= 0 and nodes[i] > node:
                i -= 1
            if i >= 0 and nodes[i] == node:
                for a in range(d):
                    cur[a] += vecs[p, i, a]
            for a in range(d):
                s = 0.0
                for b in range(d):
                    s += factors[p, j, a, b] * cur[b]
                tmp[a] = s
            for a in range(d):
                cur[a] = tmp[a]
                out[p, j, a] = tmp[a]


@nb.njit(cache=True, nogil=True)
def transposed_pairing(factors, a, db, n_steps, out):
    """``sum_{k < n_steps} <w_k, db_k>`` with ``w_0 = a`` and ``w_{k+1} = A_k^T w_k``."""
    P = factors.shape[0]
    d = a.shape[0]
    w = np.zeros(d)
    tmp = np.zeros(d)
    for p in range(P):
        w[:] = a
        acc = 0.0
        for k in range(n_steps):
            for i in range(d):
                acc += w[i] * db[p, k, i]
            for i in range(d):
                s = 0.0
                for j in range(d):
                    s += factors[p, k, j, i] * w[j]
                tmp[i] = s
            for i in range(d):
                w[i] = tmp[i]
        out[p] = acc


def warmup() -> None:
    backward_matvec(np.zeros((1, 1, 1, 1)), np.ones(1, dtype=np.int64), np.zeros((1, 1, 1)), 0, np.zeros((1, 1, 1)))
    transposed_pairing(np.zeros((1, 1, 1, 1)), np.ones(1), np.zeros((1, 1, 1)), 1, np.zeros(1))
    reflect_paths_1d(np.zeros(1), np.ones(1), np.zeros((1, 1)), 0.0, 1.0, 0.25, 0, 0.0, 0.0, 0.0, np.zeros((1, 2)), np.zeros((1, 1)))
    disk_paths(np.zeros((1, 2)), np.eye(2)[None], np.zeros((1, 1, 2)), 1.0, 0.25, 0, 0.0, 0, 0, 0.0, 0.0, np.zeros((1, 2, 2)), np.zeros((1, 1)))
    x3 = np.array([[1.0, 0.0, 0.0]])
    u3 = np.array([[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])
    hemisphere_paths(x3, u3, np.zeros((1, 1, 2)), 0.25, 100, 0, 0.0, 0, 0, 0.0, 0.0, np.zeros((1, 2, 3)), np.zeros((1, 2, 3, 2)), np.zeros((1, 1)))
