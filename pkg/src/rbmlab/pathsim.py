"""Projection scheme for reflecting Brownian motion and its perturbed flows.

One step of the scheme::

    y         = exp_{X_k}(u_k (db_k + drift_k dt))
    X_{k+1}, dl_k = project_to_domain(y)
    u_{k+1}   = transport(X_k -> X_{k+1}, u_k)

``dl_k`` is the push applied during step ``k``; it lands at node ``k + 1``.
Paths are simulated as ensembles: every array carries a leading path axis.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import REORTHONORMALIZE_EVERY, Geometry, StepTooLargeError
from .streams import RandomSource, thread_count

CONTACT_TOL = 1e-9
# stored floats per batch; keeps a batch around 160 MB
BATCH_FLOAT_BUDGET = 20_000_000

# drift(k, t_k, x_k, u_k) -> (P, d) frame-coordinate drift (already scaled by epsilon)
Drift = Callable[[int, float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")

    @classmethod
    def from_dt(cls, T: float, dt: float) -> "TimeGrid":
        return cls(T, int(round(T / dt)))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Grid node of time ``t``; raises if ``t`` is not on the grid."""
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > tol * max(1.0, self.T) or not 0 <= k <= self.n_steps:
            raise ValueError(f"time {t} is not a node of {self}")
        return k


@dataclass
class PathSample:
    """Discretised reflected paths sharing one grid.

    Shapes (``P`` paths, ``n`` steps, chart dimension ``D``, intrinsic ``d``):
    ``x (P, n+1, D)``, ``frames (P, n+1, D, d)``, ``db (P, n, d)``,
    ``dl (P, n)``, ``contact (P, n+1)``.
    """

    geometry: Geometry
    grid: TimeGrid
    x: np.ndarray
    frames: np.ndarray
    db: np.ndarray
    dl: np.ndarray
    contact: np.ndarray
    stream_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, idx) -> "PathSample":
        if isinstance(idx, (int, np.integer)):
            idx = slice(int(idx), int(idx) + 1)
        return PathSample(
            self.geometry,
            self.grid,
            self.x[idx],
            self.frames[idx],
            self.db[idx],
            self.dl[idx],
            self.contact[idx],
            self.stream_ids[idx] if len(self.stream_ids) else self.stream_ids,
        )

    @property
    def local_time(self) -> np.ndarray:
        """Cumulative local time at every node, shape ``(P, n+1)``."""
        lt = np.zeros(self.contact.shape)
        np.cumsum(self.dl, axis=1, out=lt[:, 1:])
        return lt

    def at(self, t: float) -> np.ndarray:
        return self.x[:, self.grid.index_of(t)]

    def to_csv(self, path, index: int = 0) -> None:
        """Write one path as rows ``t, X_0..X_{D-1}, dl, contact``.

        ``dl`` on a row is the push that landed at that node.
        """
        D = self.x.shape[-1]
        dl_node = np.concatenate([[0.0], self.dl[index]])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *[f"X{i}" for i in range(D)], "dl", "contact"])
            for k, t in enumerate(self.grid.times):
                w.writerow([repr(float(t)), *[repr(float(v)) for v in self.x[index, k]], repr(float(dl_node[k])), int(self.contact[index, k])])


def _as_batch(a, n_paths, width_shape):
    a = np.asarray(a, dtype=float)
    if a.shape == width_shape:
        a = np.broadcast_to(a, (n_paths,) + width_shape)
    if a.shape != (n_paths,) + width_shape:
        raise ValueError(f"expected shape {width_shape} or {(n_paths,) + width_shape}, got {a.shape}")
    return np.array(a)


def simulate_increments(
    geometry: Geometry,
    x0,
    u0,
    grid: TimeGrid,
    db: np.ndarray,
    drift: Drift | None = None,
    stream_ids=None,
) -> PathSample:
    """Run the projection scheme on given increments ``db`` of shape ``(P, n, d)``."""
    db = np.asarray(db, dtype=float)
    P, n, d = db.shape
    if n != grid.n_steps or d != geometry.dim:
        raise ValueError("increments do not match the grid / geometry dimension")
    D = geometry.chart_dim
    x = _as_batch(x0, P, (D,))
    u = _as_batch(u0, P, (D, d))
    if np.any(geometry.boundary_distance(x) < -1e-12):
        raise ValueError("starting point lies outside the domain")

    sids = np.arange(P, dtype=np.int64) if stream_ids is None else np.asarray(stream_ids, dtype=np.int64)
    if drift is None and hasattr(geometry, "fast_paths"):
        return _simulate_fast(geometry, x, u, grid, db, sids)

    # time-major buffers: every step writes a contiguous slab
    db_t = np.ascontiguousarray(np.moveaxis(db, 1, 0))
    xs = np.empty((n + 1, P, D))
    xs[0] = x
    dls = np.zeros((n, P))
    contact = np.zeros((n + 1, P), dtype=bool)
    contact[0] = geometry.boundary_distance(x) < CONTACT_TOL
    if not geometry.flat:
        us = np.empty((n + 1, P, D, d))
        us[0] = u

    dt = grid.dt
    for k in range(n):
        xi = db_t[k]
        if drift is not None:
            xi = xi + np.asarray(drift(k, k * dt, x, u), dtype=float) * dt
        try:
            x_new, push, u = geometry.step(x, u, xi)
        except StepTooLargeError as exc:
            raise StepTooLargeError(f"{exc} (step {k}, dt={dt:.3g}); halve dt and rerun") from exc
        if not geometry.flat:
            if (k + 1) % REORTHONORMALIZE_EVERY == 0:
                u = geometry.reorthonormalize(x_new, u)
            us[k + 1] = u
        x = x_new
        xs[k + 1] = x
        dls[k] = push
        contact[k + 1] = (push > 0) | (geometry.boundary_distance(x) < CONTACT_TOL)

    if geometry.flat:
        frames = np.broadcast_to(u[:, None], (P, n + 1, D, d))
    else:
        frames = np.moveaxis(us, 0, 1)
    xs, dls, contact = np.moveaxis(xs, 0, 1), dls.T, contact.T
    return PathSample(geometry, grid, xs, frames, db, dls, contact, sids)


def _simulate_fast(geometry, x, u, grid, db, sids, adapted=None, eps=0.0) -> PathSample:
    """Compiled whole-path loop; ``adapted`` selects an in-kernel adapted drift."""
    P, n, d = db.shape
    D = geometry.chart_dim
    xs, us, dls = geometry.fast_paths(x, u, db, adapted, eps, grid.dt)
    contact = np.empty((P, n + 1), dtype=bool)
    contact[:, 0] = geometry.boundary_distance(x) < CONTACT_TOL
    contact[:, 1:] = (dls > 0) | (geometry.boundary_distance(xs[:, 1:]) < CONTACT_TOL)
    frames = np.broadcast_to(u[:, None], (P, n + 1, D, d)) if us is None else us
    return PathSample(geometry, grid, xs, frames, db, dls, contact, sids)


def simulate(
    geometry: Geometry,
    x0,
    u0,
    grid: TimeGrid,
    rng: RandomSource,
    drift: Drift | None = None,
    n_paths: int = 1,
    first_stream: int | None = None,
) -> PathSample:
    """Simulate ``n_paths`` reflected paths with streams ``first_stream, first_stream+1, ...``."""
    start = rng.stream_id if first_stream is None else first_stream
    sids = np.arange(start, start + n_paths, dtype=np.int64)
    db = rng.batch_increments(sids, grid.n_steps, geometry.dim, grid.dt)
    return simulate_increments(geometry, x0, u0, grid, db, drift, sids)


def paired_simulate(geometry, x0, u0, grid, h, eps: float, rng: RandomSource, n_paths: int = 1, first_stream=None):
    """Base paths and their perturbation ``X^{eps,h}`` on common noise.

    The perturbed member runs the same increments plus the drift
    ``eps * hdot`` evaluated along its own path.
    """
    base = simulate(geometry, x0, u0, grid, rng, None, n_paths, first_stream)
    return base, perturb(base, h, eps)


def perturb(base: PathSample, h, eps: float) -> PathSample:
    """Re-run ``base`` with the extra drift ``eps * hdot`` on the same noise."""
    if eps == 0.0:
        return base
    geometry, grid = base.geometry, base.grid
    x0, u0 = base.x[:, 0], base.frames[:, 0]
    if hasattr(geometry, "fast_paths"):
        if h.deterministic:
            # a deterministic frame drift is shifted noise; same float ops as the step loop
            shifted = base.db + (eps * h.evaluate(base)) * grid.dt
            pert = _simulate_fast(geometry, x0, u0, grid, shifted, base.stream_ids)
            pert.db = base.db
            return pert
        if h.compiled is not None:
            return _simulate_fast(geometry, x0, u0, grid, base.db, base.stream_ids, h.compiled, eps)
    return simulate_increments(geometry, x0, u0, grid, base.db, h.drift(eps), base.stream_ids)


def occupation_local_time(paths: PathSample, band: float) -> np.ndarray:
    """Occupation-density estimate ``(1/2 band) * sum_k 1{dist(X_k) < band} dt``."""
    if band <= 0:
        raise ValueError("band must be positive")
    dist = paths.geometry.boundary_distance(paths.x[:, :-1])
    return np.sum(dist < band, axis=1) * paths.grid.dt / (2.0 * band)


def batch_size_for(geometry: Geometry, grid: TimeGrid, n_paths: int) -> int:
    D, d, n = geometry.chart_dim, geometry.dim, grid.n_steps
    per_path = (n + 1) * (D + (0 if geometry.flat else D * d) + 1) + n * (d + 1)
    # per-step matrix factors are built on top of the stored path
    per_path += n * d * d * 2
    return int(max(1, min(n_paths, BATCH_FLOAT_BUDGET // per_path)))


def map_batches(
    fn: Callable[[np.ndarray], dict],
    n_paths: int,
    batch_size: int,
    first_stream: int = 0,
) -> dict:
    """Apply ``fn(stream_ids) -> {name: per-path array}`` over batches and concatenate.

    Batches run on a thread pool (``RBM_THREADS``); output order follows stream
    ids, so the result does not depend on the number of threads.
    """
    starts = list(range(first_stream, first_stream + n_paths, batch_size))
    chunks = [np.arange(s, min(s + batch_size, first_stream + n_paths), dtype=np.int64) for s in starts]
    workers = min(thread_count(), len(chunks))

    def run(c):
        # copy so a returned view cannot keep the batch's full path arrays alive
        return {k: np.array(v) for k, v in fn(c).items()}

    if workers <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, chunks))
    keys = parts[0].keys()
    return {k: np.concatenate([np.asarray(p[k]) for p in parts], axis=0) for k in keys}

