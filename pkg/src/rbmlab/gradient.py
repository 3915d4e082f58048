"""Cylindrical functions, Cameron-Martin directions and the damped gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .mulfunc import MatrixPath, evolve_q_limit
from .pathsim import PathSample, TimeGrid, paired_simulate

# f(points) -> (P,) and grad(points) -> list of (P, D) chart covectors;
# ``points`` is a list with one (P, D) array per observation time
ValueFn = Callable[[list], np.ndarray]
GradFn = Callable[[list], list]


@dataclass(frozen=True)
class CylindricalFunction:
    """``F(gamma) = f(gamma_{t_1}, ..., gamma_{t_n})`` with analytic gradients."""

    times: tuple[float, ...]
    f: ValueFn
    grad: GradFn
    name: str = "F"

    def __post_init__(self):
        if len(self.times) < 1:
            raise ValueError("a cylindrical function needs at least one time")
        if any(b <= a for a, b in zip(self.times, self.times[1:])) or self.times[0] <= 0:
            raise ValueError("times must satisfy 0 < t_1 < ... < t_n")

    def nodes(self, grid: TimeGrid) -> list[int]:
        idx = [grid.index_of(t) for t in self.times]
        if idx[-1] > grid.n_steps:
            raise ValueError("cylindrical time beyond the horizon")
        return idx

    def points(self, paths: PathSample) -> list:
        return [paths.x[:, k] for k in self.nodes(paths.grid)]

    def value(self, paths: PathSample) -> np.ndarray:
        return np.asarray(self.f(self.points(paths)), dtype=float)

    def frame_gradients(self, paths: PathSample) -> dict[int, np.ndarray]:
        """``u_{t_i}^{-1} nabla_i f`` keyed by node index.

        The chart covector ``df`` is raised with the metric and expressed in
        the frame, which reduces to ``u^T g g^{-1} df = u^T df``.
        """
        idx = self.nodes(paths.grid)
        covectors = self.grad(self.points(paths))
        out: dict[int, np.ndarray] = {}
        for k, df in zip(idx, covectors):
            v = np.einsum("pai,pa->pi", paths.frames[:, k], np.asarray(df, dtype=float))
            out[k] = out.get(k, 0.0) + v
        return out

    def scaled(self, c: float) -> "CylindricalFunction":
        f, g = self.f, self.grad
        return CylindricalFunction(
            self.times,
            lambda pts: c * f(pts),
            lambda pts: [c * gi for gi in g(pts)],
            f"{c:g}*{self.name}",
        )

    def gradient_defect(self, points: list, step: float = 1e-6) -> float:
        """Max relative mismatch between analytic and central-difference gradients."""
        analytic = self.grad(points)
        worst = 0.0
        for i, p in enumerate(points):
            for a in range(p.shape[-1]):
                up = [q.copy() for q in points]
                dn = [q.copy() for q in points]
                up[i][..., a] += step
                dn[i][..., a] -= step
                fd = (self.f(up) - self.f(dn)) / (2 * step)
                an = np.asarray(analytic[i])[..., a]
                scale = np.maximum(1.0, np.abs(an))
                worst = max(worst, float(np.max(np.abs(fd - an) / scale)))
        return worst


@dataclass(frozen=True)
class CameronMartinDirection:
    """Adapted direction ``h`` given by its derivative ``hdot(k, t, x_k, u_k)``.

    ``hdot`` returns frame-coordinate vectors of shape ``(P, d)`` and may only
    look at the state at the left endpoint of each step.
    """

    hdot: Callable[[int, float, np.ndarray, np.ndarray], np.ndarray]
    name: str = "h"
    deterministic: bool = True
    h_norm_bound: float | None = None
    # (mode, param, coord, slot) for drifts the compiled path loops evaluate
    compiled: tuple | None = None

    def drift(self, eps: float):
        def _drift(k, t, x, u):
            return eps * self.hdot(k, t, x, u)

        return _drift

    def evaluate(self, paths: PathSample) -> np.ndarray:
        """``hdot`` at the left endpoint of every step: ``(P, n, d)``."""
        n = paths.grid.n_steps
        dt = paths.grid.dt
        out = np.zeros(paths.db.shape)
        if self.compiled is not None:
            mode, param, coord, slot = self.compiled
            v = paths.x[:, :-1, coord]
            if mode == _kernels.DRIFT_SGN:
                out[:, :, slot] = np.where(v >= param, 1.0, -1.0)
            elif mode == _kernels.DRIFT_TANH:
                out[:, :, slot] = np.tanh(param * v)
            return out
        if self.deterministic:
            # the value does not depend on the state; evaluate on one path
            for k in range(n):
                out[:, k] = self.hdot(k, k * dt, paths.x[:1, k], paths.frames[:1, k])
            return out
        for k in range(n):
            out[:, k] = self.hdot(k, k * dt, paths.x[:, k], paths.frames[:, k])
        return out

    def values(self, paths: PathSample) -> np.ndarray:
        """``h`` at every node, ``(P, n+1, d)`` (left-endpoint integration)."""
        hd = self.evaluate(paths)
        h = np.zeros((hd.shape[0], hd.shape[1] + 1, hd.shape[2]))
        np.cumsum(hd * paths.grid.dt, axis=1, out=h[:, 1:])
        return h


def zero_direction(d: int) -> CameronMartinDirection:
    return CameronMartinDirection(lambda k, t, x, u: np.zeros((x.shape[0], d)), "zero", True, 0.0)


@dataclass
class HVector:
    """Element of the Cameron-Martin space stored through its derivative on the grid."""

    deriv: np.ndarray  # (P, n, d)
    dt: float

    def norm2(self) -> np.ndarray:
        return np.sum(self.deriv**2, axis=(1, 2)) * self.dt

    def inner(self, hdot: np.ndarray) -> np.ndarray:
        return np.einsum("pki,pki->p", self.deriv, hdot) * self.dt

    def path(self) -> np.ndarray:
        out = np.zeros((self.deriv.shape[0], self.deriv.shape[1] + 1, self.deriv.shape[2]))
        np.cumsum(self.deriv * self.dt, axis=1, out=out[:, 1:])
        return out


def damped_gradient(F: CylindricalFunction, paths: PathSample, Q: MatrixPath | None = None) -> HVector:
    """``d/dt (DF)_t = sum_i 1{t < t_i} Q_{t,t_i} u_{t_i}^{-1} nabla_i f``."""
    if Q is None:
        Q = evolve_q_limit(paths)
    if Q.base != 0:
        raise ValueError("damped gradient needs Q_{s,t} for all s >= 0")
    return HVector(Q.backward_sum(F.frame_gradients(paths)), paths.grid.dt)


def directional_derivative(F, paths, h: CameronMartinDirection | np.ndarray, Q: MatrixPath | None = None) -> np.ndarray:
    """``D_h F = <DF, h>_H`` with left-endpoint quadrature, per path."""
    hd = h.evaluate(paths) if isinstance(h, CameronMartinDirection) else np.asarray(h, dtype=float)
    return damped_gradient(F, paths, Q).inner(hd)


def directional_derivative_direct(F, paths, h, Q: MatrixPath | None = None) -> np.ndarray:
    """``sum_i sum_{k < t_i} <v_i, Q_{k,t_i}^T hdot_k> dt`` from explicit matrices."""
    if Q is None:
        Q = evolve_q_limit(paths)
    hd = h.evaluate(paths) if isinstance(h, CameronMartinDirection) else np.asarray(h, dtype=float)
    total = np.zeros(len(paths))
    for node, v in F.frame_gradients(paths).items():
        suffix = Q.to(node)[:, :node]  # Q_{k,node}, k < node
        w = np.einsum("pkji,pkj->pki", suffix, hd[:, :node])
        total += np.einsum("pi,pki->p", v, w) * paths.grid.dt
    return total


def flow_difference_quotient(
    F: CylindricalFunction,
    geometry,
    x0,
    u0,
    grid: TimeGrid,
    h: CameronMartinDirection,
    eps: float,
    rng,
    n_paths: int = 1,
    first_stream: int | None = None,
) -> np.ndarray:
    """``(F(X^{eps,h}) - F(X)) / eps`` per path on common noise."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    base, pert = paired_simulate(geometry, x0, u0, grid, h, eps, rng, n_paths, first_stream)
    return (F.value(pert) - F.value(base)) / eps


# --- catalog -------------------------------------------------------------------


def _parse_times(spec: str, T: float) -> tuple[float, ...]:
    if "@t=" not in spec:
        return (T,)
    return tuple(float(s) for s in spec.split("@t=", 1)[1].split(","))


def make_function(spec: str, T: float = 1.0, dim: int | None = None) -> CylindricalFunction:
    """Build a cylindrical function from a selector string.

    Forms (``i`` is a chart coordinate, times default to ``T``)::

        coord:i@t=a          x_i(a)
        square:i@t=a         x_i(a)^2
        const:c              c
        exp:c,i@t=a,b,..     exp(c * sum_j x_i(t_j))
        prod:i@t=a,b,..      prod_j (1 + x_i(t_j))
        cos:m,i@t=a,b,..     prod_j (2 + cos(m pi x_i(t_j)))
        bump:i,c,w@t=a       exp(-(x_i - c)^2 / w^2)
        sum:i@t=a,b,..       sum_j x_i(t_j)
    """
    head = spec.split("@", 1)[0]
    kind, _, argstr = head.partition(":")
    args = [a for a in argstr.split(",") if a] if argstr else []
    times = _parse_times(spec, T)

    def zeros_like(pts):
        return [np.zeros_like(p) for p in pts]

    if kind == "coord":
        i = int(args[0]) if args else 0
        if len(times) != 1:
            raise ValueError("coord takes one time")

        def grad(pts):
            g = zeros_like(pts)
            g[0][:, i] = 1.0
            return g

        return CylindricalFunction(times, lambda pts: pts[0][:, i].copy(), grad, spec)
    if kind == "square":
        i = int(args[0]) if args else 0

        def grad(pts):
            g = zeros_like(pts)
            g[0][:, i] = 2.0 * pts[0][:, i]
            return g

        return CylindricalFunction(times[:1], lambda pts: pts[0][:, i] ** 2, grad, spec)
    if kind == "const":
        c = float(args[0]) if args else 1.0
        return CylindricalFunction(times[:1], lambda pts: np.full(pts[0].shape[0], c), zeros_like, spec)
    if kind == "sum":
        i = int(args[0]) if args else 0

        def grad(pts):
            g = zeros_like(pts)
            for gj in g:
                gj[:, i] = 1.0
            return g

        return CylindricalFunction(times, lambda pts: sum(p[:, i] for p in pts), grad, spec)
    if kind == "exp":
        c = float(args[0]) if args else 1.0
        i = int(args[1]) if len(args) > 1 else 0

        def val(pts):
            return np.exp(c * sum(p[:, i] for p in pts))

        def grad(pts):
            v = val(pts)
            g = zeros_like(pts)
            for gj in g:
                gj[:, i] = c * v
            return g

        return CylindricalFunction(times, val, grad, spec)
    if kind == "prod":
        i = int(args[0]) if args else 0

        def val(pts):
            return np.prod([1.0 + p[:, i] for p in pts], axis=0)

        def grad(pts):
            g = zeros_like(pts)
            factors = [1.0 + p[:, i] for p in pts]
            for j, gj in enumerate(g):
                gj[:, i] = np.prod([fac for m, fac in enumerate(factors) if m != j], axis=0) if len(factors) > 1 else 1.0
            return g

        return CylindricalFunction(times, val, grad, spec)
    if kind == "cos":
        m = float(args[0]) if args else 1.0
        i = int(args[1]) if len(args) > 1 else 0
        w = m * math.pi

        def val(pts):
            return np.prod([2.0 + np.cos(w * p[:, i]) for p in pts], axis=0)

        def grad(pts):
            g = zeros_like(pts)
            factors = [2.0 + np.cos(w * p[:, i]) for p in pts]
            for j, gj in enumerate(g):
                others = np.prod([fac for k, fac in enumerate(factors) if k != j], axis=0) if len(factors) > 1 else 1.0
                gj[:, i] = -w * np.sin(w * pts[j][:, i]) * others
            return g

        return CylindricalFunction(times, val, grad, spec)
    if kind == "bump":
        i = int(args[0]) if args else 0
        c = float(args[1]) if len(args) > 1 else 0.5
        width = float(args[2]) if len(args) > 2 else 0.5

        def val(pts):
            return np.exp(-((pts[0][:, i] - c) ** 2) / width**2)

        def grad(pts):
            g = zeros_like(pts)
            g[0][:, i] = -2.0 * (pts[0][:, i] - c) / width**2 * val(pts)
            return g

        return CylindricalFunction(times[:1], val, grad, spec)
    raise ValueError(f"unknown function selector {spec!r}; kinds: coord, square, const, exp, prod, cos, bump, sum")


def make_direction(spec: str, d: int, T: float = 1.0) -> CameronMartinDirection:
    """Build a direction from a selector string.

    ``linear[:v0,v1,..]`` constant hdot (default ``e_0``); ``sine[:w]`` hdot
    ``cos(w t) e_0`` (``w`` defaults to ``pi / T``); ``adapted-sgn[:m]`` hdot
    ``sgn(x_0 - m) e_0``; ``adapted-tanh[:a]`` hdot ``tanh(a x_0) e_{d-1}``;
    ``zero``.
    """
    kind, _, argstr = spec.partition(":")
    args = [float(a) for a in argstr.split(",") if a] if argstr else []
    e0 = np.zeros(d)
    e0[0] = 1.0
    if kind == "zero":
        return zero_direction(d)
    if kind == "linear":
        vec = np.array(args, dtype=float) if args else e0
        if vec.shape != (d,):
            raise ValueError(f"linear direction needs {d} components")
        bound = float(np.linalg.norm(vec)) * math.sqrt(T)
        return CameronMartinDirection(lambda k, t, x, u: np.broadcast_to(vec, (x.shape[0], d)), spec, True, bound)
    if kind == "sine":
        w = args[0] if args else math.pi / T
        return CameronMartinDirection(lambda k, t, x, u: np.broadcast_to(math.cos(w * t) * e0, (x.shape[0], d)), spec, True, math.sqrt(T))
    if kind == "adapted-sgn":
        m = args[0] if args else 0.5

        def hdot(k, t, x, u):
            s = np.where(x[:, 0] >= m, 1.0, -1.0)
            return s[:, None] * e0

        return CameronMartinDirection(hdot, spec, False, math.sqrt(T), (_kernels.DRIFT_SGN, m, 0, 0))
    if kind == "adapted-tanh":
        a = args[0] if args else 2.0
        e_last = np.zeros(d)
        e_last[-1] = 1.0

        def hdot(k, t, x, u):
            return np.tanh(a * x[:, 0])[:, None] * e_last

        return CameronMartinDirection(hdot, spec, False, math.sqrt(T), (_kernels.DRIFT_TANH, a, 0, d - 1))
    raise ValueError(f"unknown direction selector {spec!r}; kinds: linear, sine, adapted-sgn, adapted-tanh, zero")


def constant_direction(vec: Sequence[float], name: str = "constant") -> CameronMartinDirection:
    vec = np.asarray(vec, dtype=float)
    return CameronMartinDirection(lambda k, t, x, u: np.broadcast_to(vec, (x.shape[0], vec.size)), name, True, None)
