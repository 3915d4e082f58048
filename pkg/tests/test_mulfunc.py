from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rbmlab import oracles
from rbmlab.geometry import Disk, HalfLine, HalfSpace, Hemisphere, Interval
from rbmlab.mulfunc import (
    MatrixPath,
    boundary_annihilation,
    cocycle_check,
    evolve_q_eps,
    evolve_q_limit,
    operator_norm,
    q_norm_bound_check,
    step_factors,
    sym_expm,
)
from rbmlab.pathsim import TimeGrid, simulate, simulate_increments
from rbmlab.streams import RandomSource


def _paths(geom, n_paths=32, n_steps=500, T=1.0, seed=0, x0=None):
    d0, u0 = geom.default_start()
    return simulate(geom, d0 if x0 is None else x0, u0, TimeGrid(T, n_steps), RandomSource(seed), None, n_paths, 0)


def test_1d_penalised_closed_form():
    geom = HalfLine()
    grid = TimeGrid(1.0, 4)
    # drive to the boundary and push by 0.2 and 0.3
    db = np.array([[[-0.5], [-0.2], [0.0], [-0.3]]])
    p = simulate_increments(geom, [0.5], np.eye(1), grid, db)
    assert p.dl.sum() == pytest.approx(0.5)
    Q = evolve_q_eps(p, 0.1)
    assert abs(Q.q(0, 4)[0, 0, 0] - math.exp(-5.0)) <= 1e-12
    assert Q.q(0, 4)[0, 0, 0] == pytest.approx(6.7379e-3, rel=1e-4)
    assert evolve_q_limit(p).q(0, 4)[0, 0, 0] == 0.0


def test_flat_no_contact_is_identity():
    geom = Disk()
    grid = TimeGrid(0.01, 10)
    p = simulate_increments(geom, [0.0, 0.0], np.eye(2), grid, np.full((3, 10, 2), 1e-3))
    assert np.all(p.dl == 0)
    assert np.array_equal(evolve_q_eps(p, 0.01).q(0, 10), np.broadcast_to(np.eye(2), (3, 2, 2)))
    assert np.array_equal(evolve_q_limit(p).q(0, 10), np.broadcast_to(np.eye(2), (3, 2, 2)))


def test_hemisphere_no_contact_is_scalar_exponential():
    geom = Hemisphere()
    x0 = np.array([0.0, 0.0, 1.0])
    u0 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    grid = TimeGrid(0.5, 500)
    p = simulate(geom, x0, u0, grid, RandomSource(3), None, 16, 0)
    keep = np.all(p.dl == 0, axis=1)
    assert keep.any()
    Q = evolve_q_eps(p, 0.01).q(0, 500)[keep]
    assert np.allclose(Q, math.exp(-0.25) * np.eye(2), atol=1e-12)


def test_1d_matches_explicit_functional():
    for geom in (HalfLine(), Interval()):
        p = _paths(geom, n_paths=500, n_steps=1000, seed=5, x0=[0.1])
        Ql = evolve_q_limit(p)
        for eps in (0.5, 0.1, 0.01):
            Qe = evolve_q_eps(p, eps)
            for s, t in [(0, 1000), (250, 500), (0, 0)]:
                assert np.max(np.abs(Qe.q(s, t)[:, 0, 0] - oracles.explicit_q_eps_1d(p, eps, s, t))) <= 1e-12
        for s, t in [(0, 1000), (300, 800)]:
            assert np.array_equal(Ql.q(s, t)[:, 0, 0], oracles.explicit_q_1d(p, s, t))


def test_limit_annihilates_normal_at_contacts():
    p = _paths(Disk(), n_paths=16, n_steps=1000, seed=2, x0=[0.9, 0.0])
    assert np.any(p.dl > 0)
    assert boundary_annihilation(p, evolve_q_limit(p)) <= 1e-10


def test_disk_penalised_converges_to_limit():
    p = _paths(Disk(), n_paths=64, n_steps=1000, seed=4, x0=[0.9, 0.0])
    ql = evolve_q_limit(p).q(0, 1000)
    dist = [np.mean(np.sum((evolve_q_eps(p, e).q(0, 1000) - ql) ** 2, axis=(1, 2))) for e in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert all(b <= a for a, b in zip(dist, dist[1:]))
    assert dist[-1] <= 1e-3


def test_norm_bounds():
    hemi = _paths(Hemisphere(), n_paths=32, n_steps=500)
    rep = q_norm_bound_check(hemi, evolve_q_limit(hemi), K=-1.0, sigma=0.0)
    assert rep.holds
    disk = _paths(Disk(), n_paths=32, n_steps=500, x0=[0.8, 0.0])
    assert q_norm_bound_check(disk, evolve_q_limit(disk), K=0.0, sigma=0.0).holds
    line = _paths(HalfLine(), n_paths=32, n_steps=500, x0=[0.0])
    norms = evolve_q_limit(line).forward_norms()
    assert set(np.unique(norms)) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        q_norm_bound_check(hemi, evolve_q_limit(hemi), K=-2.0, sigma=0.0)


@pytest.mark.parametrize("eps", [None, 0.01])
def test_cocycle(eps):
    p = _paths(Disk(), n_paths=8, n_steps=400, x0=[0.8, 0.1])
    Q = evolve_q_limit(p) if eps is None else evolve_q_eps(p, eps)
    assert cocycle_check(Q, 100, 100, 300) == 0.0
    rs = np.random.default_rng(0)
    for _ in range(20):
        s, t, r = np.sort(rs.integers(0, 401, 3))
        assert cocycle_check(Q, int(s), int(t), int(r)) <= 1e-10


def test_matrix_path_views_agree():
    p = _paths(Hemisphere(), n_paths=4, n_steps=50)
    Q = evolve_q_eps(p, 0.05)
    fwd = Q.forward()
    assert np.allclose(fwd[:, 30], Q.q(0, 30))
    suffix = Q.to(40)
    assert np.allclose(suffix[:, 10], Q.q(10, 40))
    assert np.allclose(Q.forward_norms()[:, 20], operator_norm(Q.q(0, 20)))
    vec = {20: np.ones((4, 2)), 50: np.arange(8.0).reshape(4, 2)}
    g = Q.backward_sum(vec)
    want = np.einsum("pij,pj->pi", Q.q(5, 20), vec[20]) + np.einsum("pij,pj->pi", Q.q(5, 50), vec[50])
    assert np.allclose(g[:, 5], want)
    with pytest.raises(IndexError):
        Q.q(10, 5)


def test_started_later():
    p = _paths(Disk(), n_paths=4, n_steps=100, x0=[0.9, 0.0])
    Q5 = evolve_q_limit(p, 5)
    assert np.allclose(Q5.q(5, 60), evolve_q_limit(p).q(5, 60))
    with pytest.raises(IndexError):
        Q5.q(0, 10)


def test_step_factor_validation():
    p = _paths(HalfSpace(3), n_paths=2, n_steps=10, T=0.01)
    with pytest.raises(ValueError):
        step_factors(p, 0.0)


def _sym_matrices(d):
    return arrays(np.float64, (d, d), elements=st.floats(-3, 3)).map(lambda a: 0.5 * (a + a.T))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4).flatmap(_sym_matrices))
def test_sym_expm_matches_scipy(g):
    assert np.allclose(sym_expm(g), scipy.linalg.expm(g), rtol=1e-10, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3).flatmap(lambda d: arrays(np.float64, (d, d), elements=st.floats(-5, 5))))
def test_operator_norm_matches_numpy(m):
    assert operator_norm(m) == pytest.approx(np.linalg.norm(m, 2), rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.0, 0.1), st.floats(0.0, 2 * math.pi))
def test_penalised_boundary_factor_is_contraction(eps, dl, theta):
    # exp(-(P/eps + II) dl) with P, II >= 0 never expands
    geom = Disk()
    x = np.array([math.cos(theta), math.sin(theta)])
    P = geom.normal_projection_in_frame(x, np.eye(2))
    II = geom.second_fundamental_in_frame(x, np.eye(2))
    assert operator_norm(sym_expm(-(P / eps + II) * dl)) <= 1.0 + 1e-12
