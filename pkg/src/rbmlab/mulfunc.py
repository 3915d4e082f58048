"""Multiplicative functionals along simulated paths.

The penalised functional solves

    dQ^eps = -Q^eps { 1/2 R_u dt + (eps^{-1} P_u + II_u) dl },   Q^eps_0 = I,

and is integrated exactly step by step with symmetric matrix exponentials
(the ``eps^{-1} P`` term is stiff).  Its ``eps -> 0`` limit replaces the
penalty by the projection ``I - P_u`` at every contact.

Factor ``A_k`` moves from node ``k`` to ``k + 1``; the curvature term uses
the frame at node ``k`` and the boundary terms use the contact node ``k + 1``
where the push lands.  ``Q_{s,t} = A_s A_{s+1} ... A_{t-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .pathsim import PathSample


def sym_expm(g: np.ndarray) -> np.ndarray:
    """``exp(g)`` for a stack of symmetric matrices (exact via eigh)."""
    g = np.asarray(g, dtype=float)
    if g.shape[-1] == 1:
        return np.exp(g)
    w, v = np.linalg.eigh(0.5 * (g + np.swapaxes(g, -1, -2)))
    return np.einsum("...ij,...j,...kj->...ik", v, np.exp(w), v)


def operator_norm(m: np.ndarray) -> np.ndarray:
    """Spectral norm over the last two axes."""
    m = np.asarray(m, dtype=float)
    d = m.shape[-1]
    if d == 1 and m.shape[-2] == 1:
        return np.abs(m[..., 0, 0])
    if d == 2 and m.shape[-2] == 2:
        a, b, c, e = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
        fro2 = a * a + b * b + c * c + e * e
        det = a * e - b * c
        disc = np.sqrt(np.maximum(fro2 * fro2 - 4.0 * det * det, 0.0))
        return np.sqrt(0.5 * (fro2 + disc))
    return np.linalg.norm(m, ord=2, axis=(-2, -1))


@dataclass(frozen=True)
class MatrixPath:
    """Products of one-step factors ``A_base .. A_{n-1}`` for a batch of paths.

    ``factors`` has shape ``(P, n - base, d, d)``; index ``j`` holds
    ``A_{base + j}``.  Instances are never mutated.
    """

    factors: np.ndarray
    base: int = 0

    @property
    def n_paths(self) -> int:
        return self.factors.shape[0]

    @property
    def end(self) -> int:
        return self.base + self.factors.shape[1]

    @property
    def d(self) -> int:
        return self.factors.shape[-1]

    def _identity(self):
        return np.broadcast_to(np.eye(self.d), (self.n_paths, self.d, self.d)).copy()

    def q(self, s: int, t: int) -> np.ndarray:
        """``Q_{s,t}`` as an ordered product, shape ``(P, d, d)``."""
        if not self.base <= s <= t <= self.end:
            raise IndexError(f"need {self.base} <= s <= t <= {self.end}, got s={s}, t={t}")
        out = self._identity()
        for k in range(s, t):
            out = out @ self.factors[:, k - self.base]
        return out

    def forward(self) -> np.ndarray:
        """``Q_{base,t}`` for every node ``t`` from ``base`` to ``end``: ``(P, m+1, d, d)``."""
        m = self.factors.shape[1]
        out = np.empty((self.n_paths, m + 1, self.d, self.d))
        cur = self._identity()
        out[:, 0] = cur
        for j in range(m):
            cur = cur @ self.factors[:, j]
            out[:, j + 1] = cur
        return out

    def forward_norms(self) -> np.ndarray:
        """``||Q_{base,t}||`` for every node without storing the products."""
        m = self.factors.shape[1]
        out = np.empty((self.n_paths, m + 1))
        cur = self._identity()
        out[:, 0] = 1.0
        for j in range(m):
            cur = cur @ self.factors[:, j]
            out[:, j + 1] = operator_norm(cur)
        return out

    def to(self, t: int) -> np.ndarray:
        """``Q_{s,t}`` for every ``s`` in ``[base, t]`` by one backward suffix sweep."""
        if not self.base <= t <= self.end:
            raise IndexError("t outside the path")
        m = t - self.base
        out = np.empty((self.n_paths, m + 1, self.d, self.d))
        cur = self._identity()
        out[:, m] = cur
        for j in range(m - 1, -1, -1):
            cur = self.factors[:, j] @ cur
            out[:, j] = cur
        return out

    def backward_sum(self, vectors: dict[int, np.ndarray]) -> np.ndarray:
        """``g_k = sum_i 1{k < t_i} Q_{k,t_i} v_i`` for all nodes ``k``.

        ``vectors`` maps node index ``t_i`` to ``(P, d)`` arrays.  Uses the
        recursion ``g_k = A_k (g_{k+1} + v_{k+1})``.  Returns ``(P, end-base, d)``
        (``g`` vanishes at and after the last node).
        """
        m = self.factors.shape[1]
        out = np.zeros((self.n_paths, m, self.d))
        nodes = np.array(sorted(vectors), dtype=np.int64)
        if nodes.size == 0:
            return out
        vecs = np.stack([np.broadcast_to(np.asarray(vectors[int(t)], dtype=float), (self.n_paths, self.d)) for t in nodes], axis=1)
        _kernels.backward_matvec(np.ascontiguousarray(self.factors, dtype=float), nodes, np.ascontiguousarray(vecs), self.base, out)
        return out


def _curvature_factors(paths: PathSample) -> np.ndarray:
    """``expm(-1/2 R_{u_k} dt)`` for every step: ``(P, n, d, d)``."""
    geom = paths.geometry
    P, n = paths.dl.shape
    d = geom.dim
    x = paths.x[:, :-1]
    u = paths.frames[:, :-1]
    kappa = geom._ricci_scalar(x)
    if np.all(kappa == 0.0):
        return np.broadcast_to(np.eye(d), (P, n, d, d)).copy()
    ric = geom.ricci_in_frame(x, u)
    scalar = kappa[..., None, None] * np.eye(d)
    if np.max(np.abs(ric - scalar)) < 1e-12:
        # frames are orthonormal so R_u = kappa I exactly
        return np.exp(-0.5 * paths.grid.dt * kappa)[..., None, None] * np.eye(d)
    return sym_expm(-0.5 * paths.grid.dt * ric)


def step_factors(paths: PathSample, eps: float | None = None) -> np.ndarray:
    """One-step multipliers ``A_k``; ``eps=None`` gives the limit functional."""
    if eps is not None and not eps > 0:
        raise ValueError("eps must be positive")
    geom = paths.geometry
    A = _curvature_factors(paths)
    pi, ki = np.nonzero(paths.dl > 0)
    if pi.size == 0:
        return A
    xb = paths.x[pi, ki + 1]
    ub = paths.frames[pi, ki + 1]
    dl = paths.dl[pi, ki][:, None, None]
    proj = geom.normal_projection_in_frame(xb, ub)
    second = geom.second_fundamental_in_frame(xb, ub)
    if eps is None:
        boundary = sym_expm(-second * dl) @ (np.eye(geom.dim) - proj)
    else:
        boundary = sym_expm(-(proj / eps + second) * dl)
    A[pi, ki] = A[pi, ki] @ boundary
    return A


def evolve_q_eps(paths: PathSample, eps: float) -> MatrixPath:
    """Penalised functional ``Q^eps`` from node 0."""
    return MatrixPath(step_factors(paths, eps), 0)


def evolve_q_limit(paths: PathSample, s: int = 0) -> MatrixPath:
    """Limit functional ``Q`` started at node ``s``; ``Q_t P_{u_t} = 0`` at contacts."""
    if not 0 <= s <= paths.grid.n_steps:
        raise IndexError("s outside the grid")
    return MatrixPath(step_factors(paths)[:, s:], s)


@dataclass
class NormBoundReport:
    holds: bool
    margin: float  # min over paths and nodes of bound - ||Q||
    per_path: np.ndarray


def q_norm_bound_check(paths: PathSample, Q: MatrixPath, K: float, sigma: float, tol: float = 1e-10) -> NormBoundReport:
    """Check ``||Q_{0,t}|| <= exp(1/2 K t + sigma l_t)`` at every node.

    ``K`` and ``sigma`` are constants with ``Ric >= -K`` and ``II >= -sigma``.
    """
    ric_min, ii_min = paths.geometry.curvature_lower_bounds()
    if K < -ric_min - 1e-12 or sigma < -ii_min - 1e-12:
        raise ValueError(f"{paths.geometry.name}: need K >= {-ric_min} and sigma >= {-ii_min}")
    if Q.base != 0:
        raise ValueError("norm bound is stated for Q started at node 0")
    norms = Q.forward_norms()
    t = paths.grid.times[: norms.shape[1]]
    lt = paths.local_time[:, : norms.shape[1]]
    bound = np.exp(0.5 * K * t[None, :] + sigma * lt)
    slack = bound - norms
    per_path = slack.min(axis=1)
    margin = float(per_path.min())
    return NormBoundReport(margin >= -tol, margin, per_path)


def cocycle_check(Q: MatrixPath, s: int, t: int, r: int) -> float:
    """``max ||Q_{s,t} Q_{t,r} - Q_{s,r}||`` over the batch."""
    if not s <= t <= r:
        raise ValueError("need s <= t <= r")
    dev = Q.q(s, t) @ Q.q(t, r) - Q.q(s, r)
    return float(np.max(operator_norm(dev)))


def boundary_annihilation(paths: PathSample, Q: MatrixPath) -> float:
    """``max ||Q_{0,k} P_{u_k}||`` over contact nodes ``k`` with a push."""
    pi, ki = np.nonzero(paths.dl > 0)
    if pi.size == 0:
        return 0.0
    fwd = Q.forward()
    proj = paths.geometry.normal_projection_in_frame(paths.x[pi, ki + 1], paths.frames[pi, ki + 1])
    return float(np.max(operator_norm(fwd[pi, ki + 1] @ proj)))

