from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rbmlab.flows import (
    compare_marginals,
    effective_sample_size,
    girsanov_weight,
    ks_threshold,
    quasi_invariance_test,
    tail_expectation,
    weighted_ks,
)
from rbmlab.geometry import Disk, HalfLine
from rbmlab.gradient import make_direction
from rbmlab.pathsim import TimeGrid, simulate
from rbmlab.streams import RandomSource


def test_zero_eps_weight_is_one():
    p = simulate(HalfLine(), [0.5], np.eye(1), TimeGrid(1.0, 100), RandomSource(0), None, 10, 0)
    w = girsanov_weight(p, make_direction("linear", 1), 0.0)
    assert np.array_equal(w.value, np.ones(10))


def test_girsanov_weight_mean_is_one():
    p = simulate(HalfLine(), [0.5], np.eye(1), TimeGrid(1.0, 100), RandomSource(1), None, 100_000, 0)
    w = girsanov_weight(p, make_direction("linear", 1), 0.5).value
    assert abs(w.mean() - 1.0) <= 3 * w.std() / math.sqrt(w.size)
    # deterministic h: log R = eps b_1 - eps^2 / 2 exactly
    logw = girsanov_weight(p, make_direction("linear", 1), 0.5).log_value
    assert np.allclose(logw, 0.5 * p.db[:, :, 0].sum(axis=1) - 0.125)


def test_uniform_integrability_profile_decays():
    geom = Disk()
    x0, u0 = geom.default_start()
    p = simulate(geom, x0, u0, TimeGrid(1.0, 1000), RandomSource(2), None, 10_000, 0)
    w = girsanov_weight(p, make_direction("adapted-tanh", 2), 1.0).value
    tails = tail_expectation(w, [1, 2, 4, 8, 16])
    assert np.all(np.diff(tails) <= 0)
    assert tails[-1] < 0.01


def test_quasi_invariance_zero_eps_is_identical():
    geom = Disk()
    x0, u0 = geom.default_start()
    rep = quasi_invariance_test(geom, x0, u0, TimeGrid(1.0, 200), make_direction("linear:1,0", 2), 0.0, 200, RandomSource(0), first_stream=0)
    assert all(pc.ks == 0.0 and pc.mean_diff == 0.0 for pc in rep.probes)
    assert rep.ess == pytest.approx(200)


def test_quasi_invariance_halfline_passes():
    rep = quasi_invariance_test(HalfLine(), [0.5], np.eye(1), TimeGrid(1.0, 1000), make_direction("linear", 1), 0.3, 4000, RandomSource(9), first_stream=0)
    assert rep.status == "pass"


def test_quasi_invariance_detects_wrong_weight():
    geom = HalfLine()
    grid = TimeGrid(1.0, 500)
    base = simulate(geom, [0.5], np.eye(1), grid, RandomSource(3), None, 4000, 0)
    shifted = simulate(geom, [1.0], np.eye(1), grid, RandomSource(4), None, 4000, 0)
    probes = compare_marginals({1.0: base.x[:, -1]}, {1.0: shifted.x[:, -1]}, np.zeros(4000))
    assert not probes[0].passed


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 200), st.integers(5, 200), st.integers(0, 1000))
def test_weighted_ks_with_equal_weights_is_two_sample_ks(n, m, seed):
    rs = np.random.default_rng(seed)
    a = rs.standard_normal(n)
    b = rs.standard_normal(m) + 0.3
    assert weighted_ks(a, np.ones(n), b) == pytest.approx(stats.ks_2samp(a, b).statistic, abs=1e-12)


def test_weighted_ks_handles_ties():
    a = np.array([0.0, 0.0, 1.0])
    assert weighted_ks(a, np.ones(3), a.copy()) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=100))
def test_ess_bounds(w):
    ess = effective_sample_size(np.array(w))
    assert 1.0 - 1e-9 <= ess <= len(w) + 1e-9


def test_ks_threshold_shrinks_with_size():
    assert ks_threshold(1000, 1000) > ks_threshold(10_000, 10_000)
    assert ks_threshold(1e4, 1e4) == pytest.approx(1.628 * math.sqrt(2e-4))
