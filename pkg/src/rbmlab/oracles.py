"""Closed-form references for the one-dimensional geometries.

Neumann heat kernels by the method of images, semigroup gradients, exact
reflected paths ``|b|`` with Tanaka local time, the explicit flow
``|b + eps h|`` and the explicit one-dimensional functional ``Q``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special, stats

from .geometry import HalfLine, Interval
from .pathsim import PathSample, TimeGrid
from .streams import RandomSource

SQRT2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class KernelSpec:
    """Image-series kernel of ``1/2 Delta`` with Neumann conditions.

    ``geometry`` is ``"halfline"`` or ``"interval"`` (unit length).  The
    number of images is chosen at call time from the Gaussian tail.
    """

    geometry: str = "halfline"
    tail_tol: float = 1e-14

    def __post_init__(self):
        if self.geometry not in ("halfline", "interval"):
            raise ValueError("kernels exist only for halfline and interval")

    def n_images(self, t: float) -> int:
        # sum_{|k| > K} p_t(2k - 1) is below the Gaussian tail at distance 2K - 1
        z = math.sqrt(2.0 * t * max(1.0, -math.log(self.tail_tol * math.sqrt(t))))
        return int(math.ceil(0.5 * (z + 1.0))) + 1


def _heat(t, z):
    return np.exp(-z * z / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)


def _heat_dz(t, z):
    return -z / t * _heat(t, z)


def neumann_kernel(spec: KernelSpec, t: float, x, y):
    """Transition density of reflecting Brownian motion, ``p(t, x, y)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if spec.geometry == "halfline":
        return _heat(t, x - y) + _heat(t, x + y)
    K = spec.n_images(t)
    out = np.zeros(np.broadcast(x, y).shape)
    for k in range(-K, K + 1):
        out = out + _heat(t, x - y + 2 * k) + _heat(t, x + y + 2 * k)
    return out


def neumann_kernel_dx(spec: KernelSpec, t: float, x, y):
    """``d/dx p(t, x, y)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if spec.geometry == "halfline":
        return _heat_dz(t, x - y) + _heat_dz(t, x + y)
    K = spec.n_images(t)
    out = np.zeros(np.broadcast(x, y).shape)
    for k in range(-K, K + 1):
        out = out + _heat_dz(t, x - y + 2 * k) + _heat_dz(t, x + y + 2 * k)
    return out


def _domain(spec: KernelSpec, t: float, x: float):
    if spec.geometry == "interval":
        return 0.0, 1.0
    return 0.0, x + 40.0 * math.sqrt(t) + 1.0


def neumann_semigroup(spec: KernelSpec, t: float, x: float, f) -> float:
    """``P_t f(x)`` by adaptive quadrature."""
    lo, hi = _domain(spec, t, x)
    val, _ = integrate.quad(lambda y: float(neumann_kernel(spec, t, x, y)) * f(y), lo, hi, epsabs=1e-12, epsrel=1e-10, limit=400, points=[x])
    return val


def neumann_gradient(spec: KernelSpec, t: float, x: float, f) -> float:
    """``d/dx P_t f(x)`` by differentiating the kernel under the integral."""
    lo, hi = _domain(spec, t, x)
    val, _ = integrate.quad(lambda y: float(neumann_kernel_dx(spec, t, x, y)) * f(y), lo, hi, epsabs=1e-12, epsrel=1e-10, limit=400, points=[x])
    return val


# Closed forms used inside Monte Carlo loops, vectorised in (s, x).
def halfline_identity_gradient(s, x):
    """``d/dx P_s f(x)`` for ``f(y) = y`` on the half-line: ``2 Phi(x / sqrt s) - 1``."""
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(s > 0, x / np.sqrt(np.where(s > 0, s, 1.0)), np.inf)
    return np.where(s > 0, special.erf(z / math.sqrt(2.0)), 1.0)


def halfline_identity_semigroup(s: float, x):
    """``P_s f(x) = E|x + B_s|`` for ``f(y) = y``."""
    x = np.asarray(x, dtype=float)
    if s == 0:
        return x
    r = math.sqrt(s)
    return x * special.erf(x / (r * math.sqrt(2.0))) + 2.0 * r * np.exp(-x * x / (2 * s)) / SQRT2PI


def cosine_gradient(mode: float, s, x):
    """``d/dx P_s f`` for ``f(y) = cos(m pi y)`` (a Neumann eigenfunction on [0, 1])."""
    w = mode * math.pi
    return -w * np.exp(-0.5 * w * w * np.asarray(s)) * np.sin(w * np.asarray(x))


def reflected_drift_mean(x0: float, mu: float, t: float) -> float:
    """``E X_t`` for Brownian motion with drift ``mu`` reflected at 0 (Skorokhod map).

    ``X_t = W_t + max(0, sup_s (-W_s) - x0)`` with ``W = x0 + B + mu s``; the
    running maximum of ``-(B + mu s)`` has the Levy law
    ``P(M >= m) = 1 - Phi((m + mu t)/sqrt t) + exp(-2 mu m) Phi((-m + mu t)/sqrt t)``.
    """
    r = math.sqrt(t)

    def tail(m):
        return 1.0 - stats.norm.cdf((m + mu * t) / r) + math.exp(-2.0 * mu * m) * stats.norm.cdf((-m + mu * t) / r)

    overshoot, _ = integrate.quad(tail, x0, np.inf, epsabs=1e-13, limit=200)
    return x0 + mu * t + overshoot


def folded_gaussian_mean(m: float, t: float) -> float:
    """``E|m + B_t|``."""
    return float(halfline_identity_semigroup(t, m))


# --- exact one-dimensional paths -------------------------------------------------


def _tanaka(b: np.ndarray) -> np.ndarray:
    """Tanaka local time at 0 of ``|b|`` with ``sgn(0) := +1``."""
    db = np.diff(b, axis=1)
    sgn = np.where(b[:, :-1] >= 0, 1.0, -1.0)
    mart = np.zeros_like(b)
    np.cumsum(sgn * db, axis=1, out=mart[:, 1:])
    return np.abs(b) - np.abs(b[:, :1]) - mart


def exact_reflected_path_1d(grid: TimeGrid, rng: RandomSource, n_paths: int = 1, x0: float = 0.0, first_stream=None) -> PathSample:
    """``X = |b|`` on the half-line with Tanaka local time.

    ``db`` holds the increments of ``b``; the Skorokhod driver of ``X`` is
    ``X - l``.  Local-time increments are differences of the Tanaka
    process and may be slightly negative on the grid.
    """
    start = rng.stream_id if first_stream is None else first_stream
    sids = np.arange(start, start + n_paths, dtype=np.int64)
    db = rng.batch_increments(sids, grid.n_steps, 1, grid.dt)
    b = np.empty((n_paths, grid.n_steps + 1))
    b[:, 0] = x0
    np.cumsum(db[:, :, 0], axis=1, out=b[:, 1:])
    b[:, 1:] += x0
    lt = _tanaka(b)
    x = np.abs(b)[:, :, None]
    frames = np.broadcast_to(np.eye(1), (n_paths, grid.n_steps + 1, 1, 1))
    contact = x[:, :, 0] == 0.0
    return PathSample(HalfLine(), grid, x, frames, db, np.diff(lt, axis=1), contact, sids)


def explicit_flow_1d(paths: PathSample, hvals: np.ndarray, eps: float, geometry=None) -> np.ndarray:
    """``|b + eps h|`` (half-line) or its fold into ``[0, 1]`` (interval).

    ``b`` is rebuilt from the stored increments and ``hvals`` are the
    values of ``h`` at the nodes, shape ``(P, n+1)``.
    """
    geometry = geometry or paths.geometry
    b = np.zeros(paths.x.shape[:2])
    b[:, 0] = paths.x[:, 0, 0]
    np.cumsum(paths.db[:, :, 0], axis=1, out=b[:, 1:])
    b[:, 1:] += paths.x[:, :1, 0]
    w = b + eps * hvals
    if isinstance(geometry, Interval):
        return fold_interval(w, geometry.length)
    return np.abs(w)


def fold_interval(w, length: float = 1.0):
    """Reflect a real path into ``[0, length]`` (triangle wave)."""
    period = 2.0 * length
    r = np.mod(w, period)
    return np.where(r <= length, r, period - r)


def explicit_q_1d(paths: PathSample, s: int, t: int) -> np.ndarray:
    """``1`` if no push lands in nodes ``s+1 .. t``, else ``0``."""
    if not 0 <= s <= t <= paths.grid.n_steps:
        raise IndexError("need 0 <= s <= t <= n")
    return (np.sum(paths.dl[:, s:t], axis=1) == 0.0).astype(float)


def explicit_q_eps_1d(paths: PathSample, eps: float, s: int, t: int) -> np.ndarray:
    return np.exp(-np.sum(paths.dl[:, s:t], axis=1) / eps)


def ks_against_kernel(samples: np.ndarray, spec: KernelSpec, t: float, x0: float):
    """One-sample Kolmogorov-Smirnov test of ``samples`` against ``p(t, x0, .)``."""
    hi = 1.0 if spec.geometry == "interval" else x0 + 40 * math.sqrt(t) + 1
    grid = np.linspace(0.0, hi, 4001)
    dens = neumann_kernel(spec, t, x0, grid)
    cdf = np.concatenate([[0.0], integrate.cumulative_trapezoid(dens, grid)])
    cdf /= cdf[-1]
    return stats.kstest(samples, lambda v: np.interp(v, grid, cdf))
