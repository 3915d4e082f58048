"""Girsanov weights for the perturbed flows and weighted-marginal comparisons."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gradient import CameronMartinDirection
from .pathsim import PathSample, TimeGrid, paired_simulate

KS_C_ALPHA = 1.628  # two-sample KS critical constant at alpha = 0.01
MIN_ESS_FRACTION = 0.5


@dataclass(frozen=True)
class GirsanovWeight:
    """``R = exp(eps sum <hdot_k, db_k> - eps^2/2 sum |hdot_k|^2 dt)`` per path."""

    log_value: np.ndarray

    @property
    def value(self) -> np.ndarray:
        return np.exp(self.log_value)

    def effective_sample_size(self) -> float:
        return effective_sample_size(self.value)


def log_girsanov_increments(paths: PathSample, h: CameronMartinDirection, eps: float) -> np.ndarray:
    """Per-step terms of ``log R``, shape ``(P, n)``; ``hdot`` is read along ``paths``."""
    hd = h.evaluate(paths)
    return eps * np.einsum("pki,pki->pk", hd, paths.db) - 0.5 * eps * eps * np.sum(hd * hd, axis=2) * paths.grid.dt


def girsanov_weight(paths: PathSample, h: CameronMartinDirection, eps: float, start: int = 0, stop: int | None = None) -> GirsanovWeight:
    """Weight over steps ``start .. stop-1`` (the whole grid by default)."""
    if eps == 0.0:
        return GirsanovWeight(np.zeros(len(paths)))
    inc = log_girsanov_increments(paths, h, eps)[:, start:stop]
    return GirsanovWeight(inc.sum(axis=1))


def effective_sample_size(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    s1 = math.fsum(w)
    s2 = math.fsum(w * w)
    return s1 * s1 / s2 if s2 > 0 else 0.0


def tail_expectation(w: np.ndarray, levels) -> np.ndarray:
    """``E[R 1{R > M}]`` for each level ``M`` (uniform-integrability profile)."""
    w = np.asarray(w, dtype=float)
    return np.array([math.fsum(np.where(w > m, w, 0.0)) / w.size for m in levels])


def weighted_ks(a: np.ndarray, wa: np.ndarray, b: np.ndarray, wb: np.ndarray | None = None) -> float:
    """Sup distance between the weighted empirical CDFs of ``a`` and ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    wa = np.asarray(wa, dtype=float) / math.fsum(wa)
    wb = np.full(b.size, 1.0 / b.size) if wb is None else np.asarray(wb, dtype=float) / math.fsum(wb)
    pts = np.concatenate([a, b])
    order = np.argsort(pts, kind="stable")
    steps = np.concatenate([wa, -wb])[order]
    cdf_diff = np.cumsum(steps)
    # only compare after the last copy of a tied value
    sorted_pts = pts[order]
    last = np.append(sorted_pts[1:] != sorted_pts[:-1], True)
    return float(np.max(np.abs(cdf_diff[last]), initial=0.0))


def ks_threshold(n_eff: float, m: int, c_alpha: float = KS_C_ALPHA) -> float:
    return c_alpha * math.sqrt((n_eff + m) / (n_eff * m))


@dataclass
class ProbeComparison:
    time: float
    coordinate: int
    ks: float
    ks_threshold: float
    mean_diff: float
    mean_se: float
    second_moment_diff: float
    second_moment_se: float

    @property
    def passed(self) -> bool:
        return (
            self.ks <= self.ks_threshold
            and abs(self.mean_diff) <= 3 * self.mean_se + 1e-15
            and abs(self.second_moment_diff) <= 3 * self.second_moment_se + 1e-15
        )


@dataclass
class QuasiInvarianceReport:
    eps: float
    n_paths: int
    ess: float
    status: str  # "pass" | "fail" | "inconclusive"
    probes: list[ProbeComparison] = field(default_factory=list)
    weight_mean: float = 1.0
    weight_se: float = 0.0


def _paired_se(diff: np.ndarray) -> float:
    n = diff.size
    if n < 2:
        return math.inf
    return float(np.std(diff, ddof=1) / math.sqrt(n))


def compare_marginals(base: dict, pert: dict, logw: np.ndarray) -> list[ProbeComparison]:
    """Weighted base marginals against unweighted perturbed marginals.

    ``base`` and ``pert`` map probe times to ``(P, D)`` arrays.  Moments are
    compared through the per-path paired difference ``R G(X) - G(X^{eps,h})``
    (common noise), so their SE is the paired SE.
    """
    w = np.exp(logw)
    ess = effective_sample_size(w)
    out = []
    for t, xb_all in base.items():
        xp_all = pert[t]
        for c in range(xb_all.shape[-1]):
            xb = xb_all[:, c]
            xp = xp_all[:, c]
            ks = weighted_ks(xb, w, xp)
            d1 = w * xb - xp
            d2 = w * xb * xb - xp * xp
            out.append(
                ProbeComparison(
                    float(t), c, ks, ks_threshold(ess, xp.size),
                    math.fsum(d1) / d1.size, _paired_se(d1),
                    math.fsum(d2) / d2.size, _paired_se(d2),
                )
            )
    return out


def marginals(paths: PathSample, times) -> dict:
    return {float(t): paths.x[:, paths.grid.index_of(t)] for t in times}


def quasi_invariance_test(
    geometry,
    x0,
    u0,
    grid: TimeGrid,
    h: CameronMartinDirection,
    eps: float,
    n_paths: int,
    rng,
    probe_fractions=(0.25, 0.5, 1.0),
    first_stream: int | None = None,
) -> QuasiInvarianceReport:
    """Law of ``X`` under ``R^{eps,h} P`` against the law of ``X^{eps,h}`` under ``P``.

    Returns ``inconclusive`` when the effective sample size of the weights
    falls below half the ensemble.
    """
    base, pert = paired_simulate(geometry, x0, u0, grid, h, eps, rng, n_paths, first_stream)
    logw = girsanov_weight(base, h, eps).log_value
    w = np.exp(logw)
    ess = effective_sample_size(w)
    times = [grid.times[grid.index_of(f * grid.T)] for f in probe_fractions]
    probes = compare_marginals(marginals(base, times), marginals(pert, times), logw)
    if ess < MIN_ESS_FRACTION * n_paths:
        status = "inconclusive"
    else:
        status = "pass" if all(p.passed for p in probes) else "fail"
    return QuasiInvarianceReport(eps, n_paths, ess, status, probes, math.fsum(w) / w.size, _paired_se(w))
