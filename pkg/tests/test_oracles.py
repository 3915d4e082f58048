from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from rbmlab import oracles
from rbmlab.geometry import Interval
from rbmlab.mulfunc import evolve_q_limit
from rbmlab.oracles import KernelSpec
from rbmlab.pathsim import TimeGrid, simulate
from rbmlab.streams import RandomSource

HALF = KernelSpec("halfline")
UNIT = KernelSpec("interval")


def test_halfline_semigroup_of_identity():
    assert oracles.neumann_semigroup(HALF, 1.0, 0.0, lambda y: y) == pytest.approx(math.sqrt(2 / math.pi), abs=1e-10)
    assert float(oracles.halfline_identity_semigroup(1.0, 0.0)) == pytest.approx(0.797885, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_kernel_symmetry(t, x, y):
    for spec in (HALF, UNIT):
        assert float(oracles.neumann_kernel(spec, t, x, y)) == pytest.approx(float(oracles.neumann_kernel(spec, t, y, x)), abs=1e-12)


@pytest.mark.parametrize("t", [0.01, 0.3, 2.0])
def test_kernel_normalisation(t):
    assert integrate.quad(lambda y: float(oracles.neumann_kernel(UNIT, t, 0.2, y)), 0, 1, epsabs=1e-13, points=[0.2])[0] == pytest.approx(1.0, abs=1e-10)
    assert integrate.quad(lambda y: float(oracles.neumann_kernel(HALF, t, 0.2, y)), 0, np.inf, epsabs=1e-13)[0] == pytest.approx(1.0, abs=1e-10)


def test_interval_kernel_relaxes_to_uniform():
    y = np.linspace(0, 1, 201)
    dev = np.max(np.abs(oracles.neumann_kernel(UNIT, 10.0, 0.3, y) - 1.0))
    assert dev < 1e-8
    # spectral decay oracle: leading mode is 2 exp(-pi^2 t / 2)
    assert dev <= max(2 * math.exp(-(math.pi**2) * 10 / 2), 1e-14)


@pytest.mark.parametrize("spec", [HALF, UNIT], ids=["halfline", "interval"])
def test_chapman_kolmogorov(spec):
    hi = 1.0 if spec.geometry == "interval" else 12.0
    s, t, x, y = 0.3, 0.5, 0.2, 0.7
    lhs = integrate.quad(lambda z: float(oracles.neumann_kernel(spec, s, x, z) * oracles.neumann_kernel(spec, t, z, y)), 0, hi, epsabs=1e-13, limit=200)[0]
    assert lhs == pytest.approx(float(oracles.neumann_kernel(spec, s + t, x, y)), abs=1e-10)


@pytest.mark.parametrize("spec", [HALF, UNIT], ids=["halfline", "interval"])
def test_neumann_condition(spec):
    for t in (0.1, 1.0):
        assert abs(float(oracles.neumann_kernel_dx(spec, t, 0.0, 0.4))) < 1e-12
    if spec.geometry == "interval":
        assert abs(float(oracles.neumann_kernel_dx(spec, 0.2, 1.0, 0.4))) < 1e-12


def test_kernel_dx_matches_finite_difference():
    h = 1e-6
    for spec in (HALF, UNIT):
        fd = (oracles.neumann_kernel(spec, 0.3, 0.4 + h, 0.6) - oracles.neumann_kernel(spec, 0.3, 0.4 - h, 0.6)) / (2 * h)
        assert float(oracles.neumann_kernel_dx(spec, 0.3, 0.4, 0.6)) == pytest.approx(float(fd), rel=1e-7)


def test_gradient_examples():
    assert oracles.neumann_gradient(HALF, 1.0, 0.5, lambda y: y) == pytest.approx(2 * stats.norm.cdf(0.5) - 1, abs=1e-9)
    assert float(oracles.halfline_identity_gradient(1.0, 0.5)) == pytest.approx(0.382925, abs=1e-6)
    assert oracles.neumann_gradient(HALF, 1.0, 0.0, lambda y: y) == pytest.approx(0.0, abs=1e-10)
    assert oracles.neumann_gradient(UNIT, 0.5, 0.3, lambda y: 4.0) == pytest.approx(0.0, abs=1e-10)
    assert float(oracles.halfline_identity_gradient(0.0, 0.3)) == 1.0


def test_cosine_gradient_is_eigenfunction_decay():
    f = lambda y: math.cos(2 * math.pi * y)
    assert oracles.neumann_gradient(UNIT, 0.05, 0.3, f) == pytest.approx(float(oracles.cosine_gradient(2, 0.05, 0.3)), abs=1e-9)


def test_reflected_drift_mean():
    # mu = 0 reduces to the folded Gaussian
    assert oracles.reflected_drift_mean(0.0, 0.0, 1.0) == pytest.approx(math.sqrt(2 / math.pi), abs=1e-9)
    assert oracles.reflected_drift_mean(0.4, 0.0, 0.7) == pytest.approx(oracles.folded_gaussian_mean(0.4, 0.7), abs=1e-9)
    # Monte Carlo of the Skorokhod map with a fine exact-increment walk
    rs = np.random.default_rng(0)
    n, P, mu = 2000, 20000, 0.3
    w = np.cumsum(rs.standard_normal((P, n)) * math.sqrt(1 / n) + mu / n, axis=1)
    x = w[:, -1] + np.maximum(0.0, np.max(-w, axis=1))
    se = x.std() / math.sqrt(P)
    # the walk misses excursions between nodes, biasing low by about 0.58/sqrt(n)
    assert abs(x.mean() + 0.5826 / math.sqrt(n) - oracles.reflected_drift_mean(0.0, mu, 1.0)) < 3 * se


def test_exact_paths_tanaka_identity():
    grid = TimeGrid(1.0, 1000)
    p = oracles.exact_reflected_path_1d(grid, RandomSource(3), 500, 0.2)
    b = 0.2 + np.concatenate([np.zeros((500, 1)), np.cumsum(p.db[:, :, 0], axis=1)], axis=1)
    sgn = np.where(b[:, :-1] >= 0, 1.0, -1.0)
    lhs = np.abs(b[:, -1]) - p.local_time[:, -1]
    assert np.allclose(lhs, 0.2 + np.sum(sgn * p.db[:, :, 0], axis=1), atol=1e-12)
    # Tanaka increments are nonnegative up to discretisation slack
    assert p.dl.min() >= -10 * math.sqrt(grid.dt)


def test_exact_local_time_mean():
    # E l_1 = E|b_1| holds exactly on any grid, so a coarse grid suffices
    grid = TimeGrid(1.0, 1000)
    rng = RandomSource(17)
    parts = [oracles.exact_reflected_path_1d(grid, rng, 20_000, 0.0, s).dl.sum(axis=1) for s in range(0, 200_000, 20_000)]
    lt = np.concatenate(parts)
    ref = math.sqrt(2 / math.pi)
    assert abs(lt.mean() - ref) / ref <= 0.01


def test_explicit_q_matches_limit_functional():
    geom = Interval()
    p = simulate(geom, [0.5], np.eye(1), TimeGrid(1.0, 1000), RandomSource(5), None, 10_000, 0)
    Q = evolve_q_limit(p)
    assert np.array_equal(Q.q(0, 1000)[:, 0, 0], oracles.explicit_q_1d(p, 0, 1000))
    assert np.array_equal(Q.q(400, 900)[:, 0, 0], oracles.explicit_q_1d(p, 400, 900))
    flat = oracles.explicit_q_1d(p, 0, 1000)
    assert set(np.unique(flat)) <= {0.0, 1.0}
    with pytest.raises(IndexError):
        oracles.explicit_q_1d(p, 10, 5)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10))
def test_fold_interval_lands_in_unit_interval(w):
    v = float(oracles.fold_interval(np.array(w)))
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(float(oracles.fold_interval(np.array(-w))), abs=1e-12)
    assert v == pytest.approx(float(oracles.fold_interval(np.array(w + 2.0))), abs=1e-9)


def test_ks_against_kernel_detects_wrong_law():
    rs = np.random.default_rng(0)
    good = np.abs(rs.standard_normal(4000))
    assert oracles.ks_against_kernel(good, HALF, 1.0, 0.0).pvalue > 0.01
    assert oracles.ks_against_kernel(good + 0.2, HALF, 1.0, 0.0).pvalue < 1e-6


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("disk")
    with pytest.raises(ValueError):
        oracles.neumann_kernel(HALF, 0.0, 0.1, 0.2)
