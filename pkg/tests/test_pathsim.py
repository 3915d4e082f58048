from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbmlab import oracles
from rbmlab.geometry import Disk, HalfLine, HalfSpace, Hemisphere, Interval, StepTooLargeError
from rbmlab.gradient import make_direction
from rbmlab.pathsim import (
    TimeGrid,
    batch_size_for,
    map_batches,
    occupation_local_time,
    paired_simulate,
    perturb,
    simulate,
    simulate_increments,
)
from rbmlab.streams import RandomSource

GEOMETRIES = [HalfLine(), Interval(), Disk(), Hemisphere(), HalfSpace(3)]


def test_time_grid():
    g = TimeGrid.from_dt(1.0, 1e-3)
    assert g.n_steps == 1000 and g.dt == pytest.approx(1e-3)
    assert g.index_of(0.5) == 500
    with pytest.raises(ValueError):
        g.index_of(0.50005)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


@pytest.mark.parametrize("geom", GEOMETRIES, ids=lambda g: g.name)
def test_zero_increment_single_step_stays_put(geom):
    x0, u0 = geom.default_start()
    p = simulate_increments(geom, x0, u0, TimeGrid(1.0, 1), np.zeros((1, 1, geom.dim)))
    assert np.allclose(p.x[0, 1], x0, atol=1e-15)
    assert p.dl[0, 0] == 0.0


@pytest.mark.parametrize("geom", GEOMETRIES, ids=lambda g: g.name)
def test_paths_stay_in_domain(geom):
    x0, u0 = geom.default_start()
    p = simulate(geom, x0, u0, TimeGrid(1.0, 500), RandomSource(3), None, 64, 0)
    assert np.min(geom.boundary_distance(p.x)) >= -1e-12
    assert np.all(p.dl >= 0.0)
    assert np.all(p.contact[:, 1:][p.dl > 0])
    assert p.x.shape == (64, 501, geom.chart_dim)
    assert p.frames.shape == (64, 501, geom.chart_dim, geom.dim)


def test_hemisphere_frames_stay_orthonormal():
    geom = Hemisphere()
    x0, u0 = geom.default_start()
    p = simulate(geom, x0, u0, TimeGrid(1.0, 1000), RandomSource(5), None, 32, 0)
    assert np.max(geom.orthonormality_defect(p.x[:, -1], p.frames[:, -1])) < 1e-8


@pytest.mark.parametrize("geom", [HalfLine(), Interval(), Disk(), Hemisphere()], ids=lambda g: g.name)
def test_compiled_paths_match_step_loop(geom):
    x0, u0 = geom.default_start()
    grid = TimeGrid(1.0, 400)
    db = RandomSource(9).batch_increments(np.arange(50), grid.n_steps, geom.dim, grid.dt)
    fast = simulate_increments(geom, x0, u0, grid, db)
    zero = lambda k, t, x, u: np.zeros((x.shape[0], geom.dim))
    slow = simulate_increments(geom, x0, u0, grid, db, zero)
    # frames are re-orthonormalised by different (equivalent) routines on the sphere
    tol = 1e-12 if geom.name == "hemisphere" else 0.0
    assert np.allclose(fast.x, slow.x, rtol=0, atol=tol)
    assert np.allclose(fast.dl, slow.dl, rtol=0, atol=tol)
    assert np.allclose(fast.frames, slow.frames, rtol=0, atol=tol)
    assert np.array_equal(fast.contact, slow.contact)


@pytest.mark.parametrize("geom", [Interval(), Disk(), Hemisphere()], ids=lambda g: g.name)
@pytest.mark.parametrize("spec", ["adapted-sgn:0.5", "adapted-tanh:2"])
def test_compiled_adapted_drift_matches_step_loop(geom, spec):
    x0, u0 = geom.default_start()
    grid = TimeGrid(1.0, 400)
    base = simulate(geom, x0, u0, grid, RandomSource(4), None, 40, 0)
    h = make_direction(spec, geom.dim)
    assert h.compiled is not None
    fast = perturb(base, h, 0.3)
    slow = simulate_increments(geom, x0, u0, grid, base.db, h.drift(0.3))
    assert np.allclose(fast.x, slow.x, rtol=0, atol=1e-12)
    assert np.allclose(fast.dl, slow.dl, rtol=0, atol=1e-12)


def test_halfline_scheme_is_discrete_skorokhod_map():
    # X_k = W_k + max(0, max_{j<=k} -W_j) for the walk W = x0 + sum (db + eps hdot dt)
    geom = HalfLine()
    grid = TimeGrid(1.0, 1000)
    base = simulate(geom, [0.2], np.eye(1), grid, RandomSource(11), None, 200, 0)
    h = make_direction("linear", 1)
    eps = 0.3
    pert = perturb(base, h, eps)
    w = 0.2 + np.concatenate([np.zeros((200, 1)), np.cumsum(base.db[:, :, 0] + eps * grid.dt, axis=1)], axis=1)
    sk = w + np.maximum(0.0, np.maximum.accumulate(-w, axis=1))
    assert np.allclose(pert.x[:, :, 0], sk, atol=1e-12)
    assert np.allclose(pert.local_time, np.maximum(0.0, np.maximum.accumulate(-w, axis=1)), atol=1e-12)


def test_halfline_perturbed_path_against_folded_flow():
    # The projected flow is the Skorokhod map of b + eps h, not the fold |b + eps h|.
    # The two agree while b + eps h stays positive, i.e. on paths started away from 0.
    geom = HalfLine()
    grid = TimeGrid(1.0, 1000)
    base = simulate(geom, [3.0], np.eye(1), grid, RandomSource(4), None, 100, 0)
    pert = perturb(base, make_direction("linear", 1), 0.1)
    hvals = np.broadcast_to(grid.times, (100, grid.n_steps + 1))
    fold = oracles.explicit_flow_1d(base, hvals, 0.1)
    clear = np.all(base.dl == 0, axis=1) & np.all(pert.dl == 0, axis=1)
    assert clear.mean() > 0.9
    assert np.allclose(pert.x[clear, :, 0], fold[clear], atol=1e-12)


@pytest.mark.parametrize("geom", GEOMETRIES, ids=lambda g: g.name)
def test_eps_zero_pair_is_bitwise_identical(geom):
    x0, u0 = geom.default_start()
    h = make_direction("linear", geom.dim)
    base, pert = paired_simulate(geom, x0, u0, TimeGrid(1.0, 200), h, 0.0, RandomSource(2), 16, 0)
    assert np.array_equal(base.x, pert.x) and np.array_equal(base.dl, pert.dl)


def test_flow_property_shifted_noise():
    # X^{e1+e2,h}(b) = X^{e2,h}(b + e1 h) for deterministic h, pathwise
    geom = Disk()
    x0, u0 = geom.default_start()
    grid = TimeGrid(1.0, 500)
    h = make_direction("linear:1,0.5", 2)
    base = simulate(geom, x0, u0, grid, RandomSource(8), None, 64, 0)
    e1, e2 = 0.2, 0.3
    direct = perturb(base, h, e1 + e2)
    shifted = simulate_increments(geom, x0, u0, grid, base.db + e1 * h.evaluate(base) * grid.dt)
    composed = perturb(shifted, h, e2)
    assert np.allclose(direct.x, composed.x, atol=1e-12)


def test_interval_marginal_matches_neumann_kernel():
    geom = Interval()
    grid = TimeGrid(0.2, 2000)
    p = simulate(geom, [0.3], np.eye(1), grid, RandomSource(21), None, 3000, 0)
    res = oracles.ks_against_kernel(p.x[:, -1, 0], oracles.KernelSpec("interval"), 0.2, 0.3)
    assert res.pvalue > 0.01


def test_step_too_large_is_reported():
    geom = Interval()
    db = np.full((1, 1, 1), 2.0)
    with pytest.raises(StepTooLargeError, match="reduce dt"):
        simulate_increments(geom, [0.5], np.eye(1), TimeGrid(1.0, 1), db)


def test_occupation_examples():
    geom = HalfLine()
    grid = TimeGrid(1.0, 100)
    far = simulate_increments(geom, [5.0], np.eye(1), grid, np.zeros((2, 100, 1)))
    assert np.array_equal(occupation_local_time(far, 0.01), [0.0, 0.0])
    # a band wider than the interval counts every node
    inside = simulate_increments(Interval(), [0.5], np.eye(1), grid, np.zeros((1, 100, 1)))
    assert occupation_local_time(inside, 0.6)[0] == pytest.approx(1.0 / 1.2)
    with pytest.raises(ValueError):
        occupation_local_time(far, 0.0)


def test_local_time_mean_small_ensemble():
    geom = HalfLine()
    grid = TimeGrid(1.0, 1000)
    p = simulate(geom, [0.0], np.eye(1), grid, RandomSource(1), None, 4000, 0)
    lt = p.dl.sum(axis=1)
    # projection bias at this dt is about -0.58 sqrt(dt)
    ref = math.sqrt(2 / math.pi) - 0.5826 * math.sqrt(grid.dt)
    assert abs(lt.mean() - ref) < 3 * lt.std() / math.sqrt(lt.size) + 2e-3


def test_map_batches_independent_of_batching_and_threads(monkeypatch):
    geom = Disk()
    grid = TimeGrid(0.1, 100)
    x0, u0 = geom.default_start()
    rng = RandomSource(77)

    def fn(ids):
        p = simulate(geom, x0, u0, grid, rng, None, len(ids), int(ids[0]))
        return {"x": p.x[:, -1], "l": p.dl.sum(axis=1)}

    monkeypatch.setenv("RBM_THREADS", "1")
    a = map_batches(fn, 50, 50)
    monkeypatch.setenv("RBM_THREADS", "4")
    b = map_batches(fn, 50, 7)
    assert a["x"].tobytes() == b["x"].tobytes()
    assert a["l"].tobytes() == b["l"].tobytes()


def test_batch_size_positive_and_bounded():
    for geom in GEOMETRIES:
        n = batch_size_for(geom, TimeGrid(1.0, 10_000), 10**6)
        assert 1 <= n <= 10**6


def test_path_csv_roundtrip(tmp_path):
    geom = Disk()
    x0, u0 = geom.default_start()
    p = simulate(geom, x0, u0, TimeGrid(0.02, 20), RandomSource(1), None, 2, 0)
    out = tmp_path / "p.csv"
    p.to_csv(out, 1)
    rows = out.read_text().splitlines()
    assert rows[0] == "t,X0,X1,dl,contact"
    assert len(rows) == 22
    assert float(rows[-1].split(",")[1]) == p.x[1, -1, 0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 40))
def test_stream_increments_depend_only_on_key(seed, n):
    rng = RandomSource(seed)
    batch = rng.batch_increments([5, 6, 7], n, 2, 0.01)
    assert np.array_equal(batch[1], rng.increments(n, 2, 0.01, 6))


def test_thread_count_follows_env(monkeypatch):
    from rbmlab.streams import thread_count

    monkeypatch.setenv("RBM_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("RBM_THREADS", "0")
    assert thread_count() == 1
    monkeypatch.delenv("RBM_THREADS")
    assert thread_count() >= 1


def test_map_batches_releases_batch_storage():
    import gc
    import weakref

    refs = []

    def fn(ids):
        big = np.ones((len(ids), 1000))
        refs.append(weakref.ref(big))
        return {"col": big[:, 0]}

    out = map_batches(fn, 30, 10)
    gc.collect()
    assert out["col"].shape == (30,)
    assert all(r() is None for r in refs)
