"""Monte Carlo checks with standard errors and declared pass criteria.

Every experiment runs its ensemble in batches keyed by stream id, collects
per-path samples, and reduces them in stream order with ``math.fsum`` so a
report is a pure function of ``(seed, config)``.

Row statuses: ``pass``/``fail`` for criteria, ``info`` for reported values,
and ``inconclusive`` for statistical criteria whose ensemble is too small to
falsify anything.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels, oracles
from .flows import (
    compare_marginals,
    effective_sample_size,
    girsanov_weight,
    MIN_ESS_FRACTION,
    tail_expectation,
)
from .geometry import Disk, Geometry, HalfLine, Hemisphere, Interval, make_geometry
from .gradient import (
    CylindricalFunction,
    damped_gradient,
    make_direction,
    make_function,
)
from .mulfunc import (
    MatrixPath,
    boundary_annihilation,
    cocycle_check,
    evolve_q_eps,
    evolve_q_limit,
    operator_norm,
    q_norm_bound_check,
)
from .pathsim import (
    PathSample,
    TimeGrid,
    batch_size_for,
    map_batches,
    occupation_local_time,
    perturb,
    simulate,
    simulate_increments,
)
from .streams import RandomSource

Z_CRIT = 3.0
MIN_VERDICT_PATHS = 1000
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
# first-order bias of the projection scheme's running minimum, -zeta(1/2)/sqrt(2 pi)
PROJECTION_BIAS = 0.5825971579390106


@dataclass(frozen=True)
class Estimate:
    mean: float
    std_error: float
    n: int

    @classmethod
    def from_samples(cls, x) -> "Estimate":
        x = np.asarray(x, dtype=float).ravel()
        n = x.size
        if n < 2:
            raise ValueError("an estimate needs at least two samples")
        mean = math.fsum(x) / n
        var = math.fsum((x - mean) ** 2) / (n - 1)
        return cls(mean, math.sqrt(var / n), n)

    @classmethod
    def exact(cls, value: float, n: int = 1) -> "Estimate":
        return cls(float(value), 0.0, n)

    def z(self, target: float = 0.0) -> float:
        diff = self.mean - target
        if self.std_error == 0.0:
            return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
        return diff / self.std_error


@dataclass
class Row:
    quantity: str
    estimate: Estimate
    z: float = math.nan
    status: str = "info"
    epsilon: float = math.nan


@dataclass
class ExperimentReport:
    experiment: str
    geometry: str
    config: dict
    rows: list[Row] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return int(self.config.get("n_paths", 0))

    @property
    def dt(self) -> float:
        return float(self.config.get("dt", math.nan))

    @property
    def status(self) -> str:
        statuses = {r.status for r in self.rows}
        if "fail" in statuses:
            return "fail"
        if "inconclusive" in statuses:
            return "inconclusive"
        return "pass"

    def add(self, row: Row) -> Row:
        self.rows.append(row)
        return row

    def z_test(self, quantity: str, samples, target: float = 0.0, epsilon: float = math.nan) -> Row:
        """Two-sided ``|z| <= 3`` on per-path samples."""
        est = Estimate.from_samples(samples)
        z = est.z(target)
        status = _verdict(abs(z) <= Z_CRIT, est.n)
        return self.add(Row(quantity, est, z, status, epsilon))

    def upper_test(self, quantity: str, samples, epsilon: float = math.nan) -> Row:
        """One-sided ``mean <= 3 SE``."""
        est = Estimate.from_samples(samples)
        z = est.z(0.0)
        return self.add(Row(quantity, est, z, _verdict(z <= Z_CRIT, est.n), epsilon))

    def check(self, quantity: str, value: float, ok: bool, n: int = 1, statistical: bool = False, std_error: float = math.nan, epsilon: float = math.nan) -> Row:
        """A declared tolerance criterion evaluated on ``value``."""
        status = _verdict(ok, n) if statistical else ("pass" if ok else "fail")
        if not statistical and math.isnan(std_error):
            std_error = 0.0
        return self.add(Row(quantity, Estimate(float(value), std_error, n), math.nan, status, epsilon))

    def info(self, quantity: str, est: Estimate, z: float = math.nan, epsilon: float = math.nan) -> Row:
        return self.add(Row(quantity, est, z, "info", epsilon))

    def csv_rows(self) -> list[list[str]]:
        return [
            [
                self.experiment,
                self.geometry,
                str(self.n_paths),
                _fmt(self.dt),
                _fmt(r.epsilon),
                r.quantity,
                _fmt(r.estimate.mean),
                _fmt(r.estimate.std_error),
                _fmt(r.z),
                r.status,
            ]
            for r in self.rows
        ]

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "geometry": self.geometry,
            "config": self.config,
            "status": self.status,
            "notes": list(self.notes),
            "rows": [
                {
                    "quantity": r.quantity,
                    **asdict(r.estimate),
                    "z": None if math.isnan(r.z) else r.z,
                    "epsilon": None if math.isnan(r.epsilon) else r.epsilon,
                    "status": r.status,
                }
                for r in self.rows
            ],
        }


CSV_HEADER = ["experiment", "geometry", "n_paths", "dt", "epsilon", "quantity", "mean", "std_error", "z", "pass"]


def _fmt(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def _verdict(ok: bool, n: int) -> str:
    if n < MIN_VERDICT_PATHS:
        return "inconclusive"
    return "pass" if ok else "fail"


def _start(geometry: Geometry, x0=None, u0=None):
    dx, du = geometry.default_start()
    x = dx if x0 is None else np.asarray(x0, dtype=float)
    u = du if u0 is None else np.asarray(u0, dtype=float)
    if u0 is None and x0 is not None and not geometry.flat:
        u = geometry.reorthonormalize(x[None], _tangent_guess(geometry, x)[None])[0]
    return x, u


def _tangent_guess(geometry: Geometry, x):
    if isinstance(geometry, Hemisphere):
        a = np.array([0.0, 0.0, 1.0]) if abs(x[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = a - np.dot(a, x) * x
        e1 /= np.linalg.norm(e1)
        return np.stack([e1, np.cross(x, e1)], axis=1)
    return np.eye(geometry.chart_dim, geometry.dim)


def _ensemble(geometry, grid, n_paths, fn, first_stream=0, weight: float = 1.0) -> dict:
    """Run ``fn(stream_ids)`` over batches sized for ``geometry`` and ``grid``."""
    size = max(1, int(batch_size_for(geometry, grid, n_paths) / weight))
    return map_batches(fn, n_paths, size, first_stream)


def _config(**kw) -> dict:
    out = {}
    for k, v in kw.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


# --- local time ------------------------------------------------------------


def local_time_check(seed: int = 42, n_paths: int = 200_000, dt: float = 1e-4, T: float = 1.0, band: float = 0.01) -> ExperimentReport:
    """Mean boundary local time on the half-line against ``E|B_1| = sqrt(2/pi)``."""
    geom = HalfLine()
    grid = TimeGrid.from_dt(T, dt)
    rng = RandomSource(seed)
    x0, u0 = geom.default_start()

    def batch(ids):
        p = simulate(geom, x0, u0, grid, rng, None, len(ids), int(ids[0]))
        return {"l": p.dl.sum(axis=1), "occ": occupation_local_time(p, band)}

    out = _ensemble(geom, grid, n_paths, batch)
    ref = SQRT_2_OVER_PI * math.sqrt(T)
    rep = ExperimentReport("local_time", geom.name, _config(seed=seed, n_paths=n_paths, dt=grid.dt, T=T, band=band))
    lt = Estimate.from_samples(out["l"])
    occ = Estimate.from_samples(out["occ"])
    rep.info("reference_sqrt_2_over_pi", Estimate.exact(ref))
    rel = abs(lt.mean - ref) / ref
    rep.add(Row("local_time_mean", lt, lt.z(ref), _verdict(rel <= 0.02, n_paths)))
    rep.check("local_time_relative_error", rel, rel <= 0.02, n_paths, statistical=True)
    rep.info("occupation_mean", occ, occ.z(ref))
    gap = abs(occ.mean / lt.mean - 1.0)
    rep.check("occupation_vs_local_time_relative_gap", gap, gap <= 0.05, n_paths, statistical=True)
    # nodes pile up on the boundary; the excess mass is PROJECTION_BIAS * sqrt(dt) / band
    inflation = 1.0 + PROJECTION_BIAS * math.sqrt(grid.dt) / band
    rep.info("occupation_boundary_layer_factor", Estimate.exact(inflation, n_paths))
    rep.info("occupation_mean_layer_corrected", Estimate(occ.mean / inflation, occ.std_error / inflation, n_paths))
    return rep


# --- multiplicative functional checks ------------------------------------------


def q_exactness_check(seed: int = 42, n_paths: int = 10_000, dt: float = 1e-3, T: float = 1.0, eps_list: Sequence[float] = (0.5, 0.1, 0.01)) -> ExperimentReport:
    """One-dimensional closed forms of ``Q^eps`` and ``Q`` against mulfunc."""
    grid = TimeGrid.from_dt(T, dt)
    n = grid.n_steps
    rng = RandomSource(seed)
    rep = ExperimentReport("q_exactness", "halfline+interval", _config(seed=seed, n_paths=n_paths, dt=grid.dt, T=T, eps_list=tuple(eps_list)))
    for geom in (HalfLine(), Interval()):
        x0, u0 = geom.default_start()

        def batch(ids, geom=geom, x0=x0, u0=u0):
            p = simulate(geom, x0, u0, grid, rng, None, len(ids), int(ids[0]))
            lt = p.local_time
            out = {}
            for t in (n // 2, n):
                for eps in eps_list:
                    q = evolve_q_eps(p, eps).to(t)[:, :, 0, 0]
                    ref = np.exp(-(lt[:, t : t + 1] - lt[:, : t + 1]) / eps)
                    out[f"eps{eps}_t{t}"] = np.max(np.abs(q - ref), axis=1)
                q = evolve_q_limit(p).to(t)[:, :, 0, 0]
                ind = (lt[:, t : t + 1] - lt[:, : t + 1] == 0.0).astype(float)
                explicit = np.stack([oracles.explicit_q_1d(p, s, t) for s in range(0, t + 1, max(1, t // 8))], axis=1)
                out[f"limit_t{t}"] = np.maximum(
                    np.max(np.abs(q - ind), axis=1),
                    np.max(np.abs(q[:, :: max(1, t // 8)] - explicit), axis=1),
                )
            return out

        res = _ensemble(geom, grid, n_paths, batch)
        worst_eps = max(float(np.max(v)) for k, v in res.items() if k.startswith("eps"))
        worst_lim = max(float(np.max(v)) for k, v in res.items() if k.startswith("limit"))
        rep.check(f"{geom.name}_q_eps_max_abs_error", worst_eps, worst_eps <= 1e-12, n_paths)
        rep.check(f"{geom.name}_q_limit_max_abs_error", worst_lim, worst_lim <= 1e-12, n_paths)
    return rep


def q_convergence_check(seed: int = 42, n_paths: int = 2000, dt: float = 1e-3, T: float = 1.0, geometry: str = "disk") -> ExperimentReport:
    """``E||Q^eps_{0,T} - Q_{0,T}||^2`` along ``eps = 10^{-1}, 10^{-1.5}, ..., 10^{-4}``."""
    geom = make_geometry(geometry)
    grid = TimeGrid.from_dt(T, dt)
    rng = RandomSource(seed)
    x0, u0 = geom.default_start()
    eps_grid = [10.0 ** (-1 - 0.5 * j) for j in range(7)]

    def batch(ids):
        p = simulate(geom, x0, u0, grid, rng, None, len(ids), int(ids[0]))
        Q = evolve_q_limit(p)
        qT = Q.q(0, grid.n_steps)
        out = {f"d{j}": operator_norm(evolve_q_eps(p, e).q(0, grid.n_steps) - qT) ** 2 for j, e in enumerate(eps_grid)}
        out["annihilation"] = np.array([boundary_annihilation(p, Q)])
        return out

    res = _ensemble(geom, grid, n_paths, batch, weight=2.0)
    rep = ExperimentReport("q_convergence", geom.name, _config(seed=seed, n_paths=n_paths, dt=grid.dt, T=T))
    means = []
    for j, e in enumerate(eps_grid):
        est = Estimate.from_samples(res[f"d{j}"])
        means.append(est.mean)
        rep.info("l2_distance_sq", est, epsilon=e)
    steps = np.diff(means)
    rep.check("l2_distance_nonincreasing_max_step", float(np.max(steps)), bool(np.all(steps <= 0.0)), n_paths)
    rep.check("l2_distance_at_1e-4", means[-1], means[-1] <= 1e-3, n_paths)
    worst = float(np.max(res["annihilation"]))
    rep.check("boundary_annihilation_max", worst, worst <= 1e-10, n_paths)
    return rep


def cocycle_norm_check(seed: int = 42, n_paths: int = 10_000, dt: float = 1e-3, T: float = 1.0, n_triples: int = 1000) -> ExperimentReport:
    """Cocycle identity on random index triples and the curvature norm bounds."""
    grid = TimeGrid.from_dt(T, dt)
    n = grid.n_steps
    rng = RandomSource(seed)
    rep = ExperimentReport("cocycle_norm", "disk+hemisphere", _config(seed=seed, n_paths=n_paths, dt=grid.dt, T=T, n_triples=n_triples))

    disk = Disk()
    x0, u0 = disk.default_start()
    sample = simulate(disk, x0, u0, grid, rng, None, 16, 10**9)
    picker = rng.generator(10**9 + 1)
    triples = np.sort(picker.integers(0, n + 1, size=(n_triples, 3)), axis=1)
    worst = 0.0
    half = n_triples // 2
    for Q, chunk in ((evolve_q_limit(sample), triples[:half]), (evolve_q_eps(sample, 0.01), triples[half:])):
        for s, t, r in chunk:
            worst = max(worst, cocycle_check(Q, int(s), int(t), int(r)))
    rep.check("cocycle_max_deviation", worst, worst <= 1e-10, n_triples)

    for geom, K, sigma in ((Hemisphere(), -1.0, 0.0), (disk, 0.0, 0.0)):
        gx0, gu0 = geom.default_start()

        def batch(ids, geom=geom, gx0=gx0, gu0=gu0, K=K, sigma=sigma):
            p = simulate(geom, gx0, gu0, grid, rng, None, len(ids), int(ids[0]))
            rpt = q_norm_bound_check(p, evolve_q_limit(p), K, sigma)
            return {"margin": rpt.per_path}

        res = _ensemble(geom, grid, n_paths, batch, weight=2.0)
        margin = float(np.min(res["margin"]))
        rep.check(f"{geom.name}_norm_bound_min_margin", margin, margin >= -1e-10, n_paths)
    return rep


# --- integration by parts ---------------------------------------------------------

IBP_BATTERIES = {
    "interval": [
        ("coord:0@t=1", "linear"),
        ("square:0@t=1", "linear"),
        ("cos:1,0@t=0.5,1", "sine"),
        ("prod:0@t=0.25,0.5,1", "adapted-sgn:0.5"),
        ("bump:0,0.3,0.4@t=1", "adapted-sgn:0.5"),
    ],
    "disk": [
        ("sum:0@t=0.5,1", "linear:1,0"),
        ("exp:0.5,1@t=0.5,1", "linear:0,1"),
        ("prod:0@t=0.5,1", "adapted-tanh"),
        ("cos:1,1@t=0.5,1", "adapted-tanh"),
        ("sum:1@t=0.5,1", "linear:1,0"),
    ],
    "hemisphere": [
        ("sum:2@t=0.5,1", "linear:1,0"),
        ("exp:0.5,0@t=0.5,1", "linear:0,1"),
        ("prod:1@t=0.5,1", "adapted-tanh"),
        ("cos:1,2@t=0.5,1", "adapted-tanh"),
        ("sum:0@t=0.5,1", "linear:1,0"),
    ],
}


def _intercept_weights(eps_list: Sequence[float]) -> np.ndarray:
    """Least-squares weights ``c`` so that ``sum_j c_j q(eps_j)`` is the fitted value at 0."""
    X = np.column_stack([np.ones(len(eps_list)), np.asarray(eps_list, dtype=float)])
    return np.linalg.pinv(X)[0]


def ibp_check(
    geometry: str = "interval",
    battery: Sequence[tuple[str, str]] | None = None,
    eps_list: Sequence[float] = (0.1, 0.01, 0.001),
    n_paths: int = 100_000,
    dt: float = 1e-3,
    T: float = 1.0,
    seed: int = 42,
    x0=None,
) -> ExperimentReport:
    """``E D_h F``, the flow quotients and ``E F int <hdot, dB>`` on common noise.

    ``A`` is the damped-gradient estimator, ``B(eps)`` the flow difference
    quotient and ``C`` the stochastic-integral weight.  ``B`` is extrapolated
    to ``eps = 0`` by a per-path least-squares line through the sweep.
    """
    geom = make_geometry(geometry)
    grid = TimeGrid.from_dt(T, dt)
    rng = RandomSource(seed)
    x0v, u0 = _start(geom, x0)
    battery = list(battery or IBP_BATTERIES[geom.name if geom.name in IBP_BATTERIES else "interval"])
    funcs = {spec: make_function(spec, T, geom.chart_dim) for spec, _ in battery}
    dirs = {spec: make_direction(spec, geom.dim, T) for _, spec in battery}
    for m in dirs.values():
        if m.h_norm_bound is None:
            raise ValueError("integration by parts is checked for directions with a bounded H-norm")
    eps_list = list(eps_list)

    def batch(ids):
        base = simulate(geom, x0v, u0, grid, rng, None, len(ids), int(ids[0]))
        Q = evolve_q_limit(base)
        values = {s: F.value(base) for s, F in funcs.items()}
        grads = {s: damped_gradient(F, base, Q) for s, F in funcs.items()}
        out = {}
        for hs, h in dirs.items():
            hd = h.evaluate(base)
            stoch = np.einsum("pki,pki->p", hd, base.db)
            perturbed = {}
            for e in eps_list:
                pert = perturb(base, h, e)
                perturbed[e] = {s: funcs[s].value(pert) for s, hh in battery if hh == hs}
            for j, (fs, hh) in enumerate(battery):
                if hh != hs:
                    continue
                out[f"A{j}"] = grads[fs].inner(hd)
                out[f"C{j}"] = values[fs] * stoch
                for i, e in enumerate(eps_list):
                    out[f"B{j}_{i}"] = (perturbed[e][fs] - values[fs]) / e
        return out

    res = _ensemble(geom, grid, n_paths, batch, weight=3.0)
    rep = ExperimentReport(
        "ibp", geom.name,
        _config(seed=seed, n_paths=n_paths, dt=grid.dt, T=T, x0=np.asarray(x0v), eps_list=tuple(eps_list), battery=[list(b) for b in battery]),
    )
    c = _intercept_weights(eps_list)
    for j, (fs, hs) in enumerate(battery):
        tag = f"[{fs}|{hs}]"
        A, C = res[f"A{j}"], res[f"C{j}"]
        rep.info(f"A{tag}", Estimate.from_samples(A))
        rep.info(f"C{tag}", Estimate.from_samples(C))
        rep.z_test(f"A-C{tag}", A - C)
        Bs = [res[f"B{j}_{i}"] for i in range(len(eps_list))]
        for e, B in zip(eps_list, Bs):
            rep.info(f"B{tag}", Estimate.from_samples(B), epsilon=e)
        B0 = sum(ci * b for ci, b in zip(c, Bs))
        rep.info(f"B0{tag}", Estimate.from_samples(B0), epsilon=0.0)
        rep.z_test(f"B0-C{tag}", B0 - C, epsilon=0.0)
        paired = float(np.var(A - C, ddof=1))
        unpaired = float(np.var(A, ddof=1) + np.var(C, ddof=1))
        rep.info(f"pairing_variance_ratio{tag}", Estimate.exact(paired / unpaired if unpaired > 0 else 0.0, n_paths))
    return rep


# --- Bismut formula ---------------------------------------------------------------


def _bismut_weights(paths: PathSample, a: np.ndarray, t_node: int) -> np.ndarray:
    """``sum_{k < t_node} <Q_{0,k}^T a, db_k> / t`` per path."""
    A = evolve_q_limit(paths).factors
    acc = np.zeros(len(paths))
    a = np.asarray(a, dtype=float).reshape(-1)
    _kernels.transposed_pairing(np.ascontiguousarray(A), a, np.ascontiguousarray(paths.db), t_node, acc)
    return acc / (t_node * paths.grid.dt)


def bismut_check(
    geometry: str = "halfline",
    f: str = "coord:0",
    x0=None,
    v=None,
    t: float = 1.0,
    n_paths: int = 200_000,
    dt: float | None = None,
    seed: int = 42,
    delta: float = 1e-2,
) -> ExperimentReport:
    """Bismut estimator of ``<v, grad P_t f(x)>``.

    One-dimensional geometries compare with the Neumann-kernel oracle.  Other
    geometries compare per path with the common-noise central difference of
    ``f(X_t)`` started at ``x +- delta u v``.
    """
    geom = make_geometry(geometry)
    one_d = isinstance(geom, (HalfLine, Interval))
    if dt is None:
        dt = 1e-4 if one_d else 1e-3
    if x0 is None:
        x0 = [0.5] if one_d else [0.3, 0.0] if isinstance(geom, Disk) else None
    x0v, u0 = _start(geom, x0)
    v = np.eye(geom.dim)[0] if v is None else np.asarray(v, dtype=float)
    grid = TimeGrid.from_dt(t, dt)
    F = make_function(f, t, geom.chart_dim)
    rng = RandomSource(seed)
    # frame coordinates of v at x: v is already given in the frame u0
    a = v
    shift = delta * (u0 @ v)

    def batch(ids):
        p = simulate(geom, x0v, u0, grid, rng, None, len(ids), int(ids[0]))
        est = F.value(p) * _bismut_weights(p, a, grid.n_steps)
        out = {"bismut": est}
        if not one_d:
            plus = simulate_increments(geom, _on_manifold(geom, x0v + shift), _transport(geom, x0v, x0v + shift, u0), grid, p.db, None, p.stream_ids)
            minus = simulate_increments(geom, _on_manifold(geom, x0v - shift), _transport(geom, x0v, x0v - shift, u0), grid, p.db, None, p.stream_ids)
            out["fd"] = (F.value(plus) - F.value(minus)) / (2 * delta)
        return out

    res = _ensemble(geom, grid, n_paths, batch, weight=3.0 if not one_d else 1.0)
    rep = ExperimentReport(
        "bismut", geom.name,
        _config(seed=seed, n_paths=n_paths, dt=grid.dt, t=t, f=f, x0=np.asarray(x0v), v=v, delta=delta if not one_d else None),
    )
    if one_d:
        spec = oracles.KernelSpec(geom.name)
        fn = lambda y: float(F.f([np.array([[y]])])[0])  # noqa: E731
        ref = oracles.neumann_gradient(spec, t, float(x0v[0]), fn) * float(v[0] * u0[0, 0])
        rep.info("oracle_gradient", Estimate.exact(ref))
        rep.z_test("bismut_estimator", res["bismut"], ref)
    else:
        rep.info("bismut_estimator", Estimate.from_samples(res["bismut"]))
        rep.info("finite_difference", Estimate.from_samples(res["fd"]))
        rep.z_test("bismut-finite_difference", res["bismut"] - res["fd"])
    return rep


def _on_manifold(geom, x):
    if isinstance(geom, Hemisphere):
        return x / np.linalg.norm(x)
    return x


def _transport(geom, x_from, x_to, u):
    x_to = _on_manifold(geom, x_to)
    return geom.transport_frame(x_from[None], x_to[None], u[None])[0]


# --- martingale and Clark-Ocone --------------------------------------------------


def _semigroup_gradient(geom: Geometry, f: str):
    """Closed-form ``(s, x) -> d/dx P_s f(x)`` for the supported 1D cases."""
    if f.startswith("const"):
        return lambda s, x: np.zeros(np.broadcast(np.asarray(s), np.asarray(x)).shape)
    if isinstance(geom, HalfLine) and f == "coord:0":
        return oracles.halfline_identity_gradient
    if isinstance(geom, Interval) and f.startswith("cos:"):
        m = float(f.split(":")[1].split(",")[0].split("@")[0])
        return lambda s, x: oracles.cosine_gradient(m, s, x)
    raise ValueError(f"no closed-form semigroup gradient for {f!r} on {geom.name}; use halfline with coord:0, interval with cos:m, or const")


def _plain_function(f: str, T: float) -> Callable:
    F = make_function(f, T, 1)
    return lambda x: F.f([x[:, None]])


def martingale_check(
    geometry: str = "halfline",
    f: str = "coord:0",
    x0: float = 0.5,
    t: float = 1.0,
    probes: Sequence[float] = (0.25, 0.5, 0.75),
    n_paths: int = 100_000,
    dt: float = 1e-4,
    seed: int = 42,
) -> ExperimentReport:
    """``s -> Q_{0,s} d/dx P_{t-s} f(X_s)`` has constant mean over the probe times."""
    geom = make_geometry(geometry)
    grad = _semigroup_gradient(geom, f)
    grid = TimeGrid.from_dt(t, dt)
    nodes = [grid.index_of(s * t) for s in probes]
    rng = RandomSource(seed)
    u0 = np.eye(1)

    def batch(ids):
        p = simulate(geom, [x0], u0, grid, rng, None, len(ids), int(ids[0]))
        alive = np.cumsum(p.dl, axis=1) == 0.0  # Q_{0,k+1} in one dimension
        return {f"m{j}": np.where(alive[:, k - 1], grad(t - k * grid.dt, p.x[:, k, 0]), 0.0) for j, k in enumerate(nodes)}

    res = _ensemble(geom, grid, n_paths, batch)
    ref = float(grad(t, x0))
    rep = ExperimentReport("martingale", geom.name, _config(seed=seed, n_paths=n_paths, dt=grid.dt, t=t, f=f, x0=x0, probes=tuple(probes)))
    rep.info("s=0", Estimate.exact(ref))
    for j, s in enumerate(probes):
        est = Estimate.from_samples(res[f"m{j}"])
        rep.info(f"s={s:g}t", est, est.z(ref))
    for i in range(len(probes)):
        for j in range(i + 1, len(probes)):
            rep.z_test(f"s={probes[i]:g}t-s={probes[j]:g}t", res[f"m{i}"] - res[f"m{j}"])
    return rep


def clark_ocone_check(
    geometry: str = "halfline",
    f: str = "coord:0",
    x0: float = 0.0,
    T: float = 1.0,
    n_paths: int = 100_000,
    dt: float = 1e-4,
    seed: int = 42,
) -> ExperimentReport:
    """Residual of the martingale representation of ``f(X_T)``.

    The coarse run uses the same Brownian path (pairs of fine increments
    summed), so the refinement ratio is measured on common noise.
    """
    geom = make_geometry(geometry)
    grad = _semigroup_gradient(geom, f)
    fn = _plain_function(f, T)
    fine = TimeGrid.from_dt(T, dt)
    if fine.n_steps % 2:
        raise ValueError("n_steps must be even for the refinement study")
    coarse = TimeGrid(T, fine.n_steps // 2)
    rng = RandomSource(seed)
    u0 = np.eye(1)

    def integral(p: PathSample):
        n = p.grid.n_steps
        s = T - p.grid.times[:n]
        return np.einsum("pk,pk->p", grad(s[None, :], p.x[:, :n, 0]), p.db[:, :, 0])

    def batch(ids):
        p = simulate(geom, [x0], u0, fine, rng, None, len(ids), int(ids[0]))
        db2 = p.db.reshape(len(ids), coarse.n_steps, 2, 1).sum(axis=2)
        c = simulate_increments(geom, [x0], u0, coarse, db2, None, p.stream_ids)
        return {
            "F": fn(p.x[:, -1, 0]),
            "I": integral(p),
            "Fc": fn(c.x[:, -1, 0]),
            "Ic": integral(c),
        }

    res = _ensemble(geom, fine, n_paths, batch, weight=2.0)
    rep = ExperimentReport("clark_ocone", geom.name, _config(seed=seed, n_paths=n_paths, dt=fine.dt, T=T, f=f, x0=x0))
    var_f = float(np.var(res["F"], ddof=1))
    rho = res["F"] - math.fsum(res["F"]) / n_paths - res["I"]
    rho_c = res["Fc"] - math.fsum(res["Fc"]) / n_paths - res["Ic"]
    r2 = Estimate.from_samples(rho**2)
    r2c = Estimate.from_samples(rho_c**2)
    rep.info("var_F", Estimate.exact(var_f, n_paths))
    rep.info("residual_sq", r2)
    rep.info("residual_sq_coarse", r2c)
    if var_f == 0.0:
        worst = float(np.max(np.abs(rho)))
        rep.check("residual_max_abs_constant_f", worst, worst == 0.0, n_paths)
        return rep
    ratio = r2.mean / var_f
    rep.check("residual_sq_over_var", ratio, ratio <= 0.01, n_paths, statistical=True, std_error=r2.std_error / var_f)
    refine = r2.mean / r2c.mean
    rep.check("refinement_ratio", refine, 0.4 <= refine <= 0.6, n_paths, statistical=True)
    return rep


# --- log-Sobolev ---------------------------------------------------------------------

LSI_BATTERIES = {
    "interval": ["coord:0@t=1", "cos:1,0@t=0.5,1", "exp:1,0@t=0.25,0.5,1", "prod:0@t=0.5,1", "bump:0,0.4,0.3@t=1"],
    "hemisphere": ["exp:1,2@t=1", "cos:1,0@t=0.5,1", "prod:1@t=0.25,0.5,1", "bump:2,0.6,0.3@t=1", "sum:0@t=0.5,1"],
    "disk": ["exp:1,0@t=1", "cos:1,1@t=0.5,1", "prod:0@t=0.25,0.5,1", "bump:0,0.2,0.4@t=1", "sum:1@t=0.5,1"],
}


def lsi_check(geometry: str = "interval", battery: Sequence[str] | None = None, n_paths: int = 100_000, dt: float = 1e-3, T: float = 1.0, seed: int = 42) -> ExperimentReport:
    """``mu(F^2 log F^2) <= 2 E||DF||^2_H`` after empirical normalisation ``mu(F^2) = 1``."""
    geom = make_geometry(geometry)
    grid = TimeGrid.from_dt(T, dt)
    rng = RandomSource(seed)
    x0, u0 = geom.default_start()
    battery = list(battery or LSI_BATTERIES[geom.name])
    funcs = [make_function(s, T, geom.chart_dim) for s in battery]

    def batch(ids):
        p = simulate(geom, x0, u0, grid, rng, None, len(ids), int(ids[0]))
        Q = evolve_q_limit(p)
        out = {}
        for j, F in enumerate(funcs):
            out[f"F{j}"] = F.value(p)
            out[f"E{j}"] = damped_gradient(F, p, Q).norm2()
        return out

    res = _ensemble(geom, grid, n_paths, batch, weight=2.0)
    rep = ExperimentReport("lsi", geom.name, _config(seed=seed, n_paths=n_paths, dt=grid.dt, T=T, battery=battery))
    for j, spec in enumerate(battery):
        Fv, energy = res[f"F{j}"], res[f"E{j}"]
        c2 = math.fsum(Fv * Fv) / Fv.size
        if c2 == 0.0:
            raise ValueError(f"{spec} vanishes on every path")
        g2 = Fv * Fv / c2
        ent = np.where(g2 > 0, g2 * np.log(np.where(g2 > 0, g2, 1.0)), 0.0)
        en = energy / c2
        rep.info(f"entropy[{spec}]", Estimate.from_samples(ent))
        rep.info(f"energy[{spec}]", Estimate.from_samples(en))
        rep.upper_test(f"entropy-2energy[{spec}]", ent - 2.0 * en)
    return rep


# --- the one-dimensional counterexample -------------------------------------------


def counterexample_demo(n_paths: int = 100_000, dt: float = 1e-3, eps: float = 1e-3, seed: int = 42) -> ExperimentReport:
    """``M = [0, 1]``, ``x0 = 0``, ``h_t = t``, ``F(gamma) = gamma_1``.

    Criteria: a positive fraction of paths with quotient ``< -0.5`` while
    ``D_h F >= 0``; equal means; ``D_h F >= 0`` on every path.  Rows tagged
    ``fold`` repeat the quotient for the explicit flow that folds
    ``b + eps h`` into ``[0, 1]`` (diagnostic only).
    """
    geom = Interval()
    grid = TimeGrid.from_dt(1.0, dt)
    rng = RandomSource(seed)
    h = make_direction("linear", 1, 1.0)
    F = make_function("coord:0@t=1", 1.0, 1)
    u0 = np.eye(1)
    hvals = grid.times[None, :]

    def batch(ids):
        base = simulate(geom, [0.0], u0, grid, rng, None, len(ids), int(ids[0]))
        pert = perturb(base, h, eps)
        d = directional_derivative_limit(F, base, h)
        q = (F.value(pert) - F.value(base)) / eps
        folded0 = oracles.explicit_flow_1d(base, np.zeros_like(hvals), 0.0)
        folded = oracles.explicit_flow_1d(base, hvals, eps)
        qf = (folded[:, -1] - folded0[:, -1]) / eps
        return {"q": q, "d": d, "qf": qf}

    res = _ensemble(geom, grid, n_paths, batch)
    q, d, qf = res["q"], res["d"], res["qf"]
    rep = ExperimentReport("counterexample", geom.name, _config(seed=seed, n_paths=n_paths, dt=grid.dt, T=1.0, x0=0.0, h="linear", f="coord:0@t=1", epsilon=eps))
    hit = ((q < -0.5) & (d >= -1e-9)).astype(float)
    frac = Estimate.from_samples(hit)
    rep.add(Row("fraction_q_below_-0.5_with_DhF_nonneg", frac, math.nan, _verdict(frac.mean > 0.05, n_paths), eps))
    rep.info("quotient_mean", Estimate.from_samples(q), epsilon=eps)
    rep.info("DhF_mean", Estimate.from_samples(d))
    rep.z_test("quotient-DhF", q - d, epsilon=eps)
    rep.check("DhF_min", float(np.min(d)), bool(np.min(d) >= -1e-9), n_paths)
    rep.info("max_abs_quotient-DhF", Estimate.exact(float(np.max(np.abs(q - d))), n_paths), epsilon=eps)
    rep.info("fold_fraction_q_below_-0.5", Estimate.from_samples((qf < -0.5).astype(float)), epsilon=eps)
    rep.info("fold_quotient_mean", Estimate.from_samples(qf), epsilon=eps)
    fz = Estimate.from_samples(qf - d)
    rep.info("fold_quotient-DhF", fz, fz.z(), epsilon=eps)
    return rep


def directional_derivative_limit(F: CylindricalFunction, paths: PathSample, h) -> np.ndarray:
    return damped_gradient(F, paths).inner(h.evaluate(paths))


# --- Girsanov and quasi-invariance ---------------------------------------------------


def girsanov_check(
    n_paths: int = 100_000,
    dt: float = 1e-3,
    T: float = 1.0,
    eps_list: Sequence[float] = (0.2, 0.3),
    seed: int = 42,
    geometries: Sequence[str] = ("halfline", "disk"),
    mean_eps: float = 0.5,
) -> ExperimentReport:
    """Mean of the Girsanov weight and weighted against perturbed marginals.

    Half-line rows also compare the weighted mean of ``X_T`` with the
    reflected-drift oracle corrected by the projection scheme's first-order
    bias.
    """
    rng = RandomSource(seed)
    rep = ExperimentReport("girsanov", "+".join(geometries), _config(seed=seed, n_paths=n_paths, dt=TimeGrid.from_dt(T, dt).dt, T=T, eps_list=tuple(eps_list), mean_eps=mean_eps))
    grid = TimeGrid.from_dt(T, dt)
    probe_times = [grid.times[grid.index_of(fr * T)] for fr in (0.25, 0.5, 1.0)]
    for gi, name in enumerate(geometries):
        geom = make_geometry(name)
        x0, u0 = (np.array([0.0]), np.eye(1)) if isinstance(geom, HalfLine) else (np.array([0.5, 0.0]), np.eye(2)) if isinstance(geom, Disk) else geom.default_start()
        h = make_direction("linear", geom.dim, T)
        tail_h = make_direction("adapted-tanh", geom.dim, T)
        first = gi * 10 * n_paths

        def batch(ids, geom=geom, x0=x0, u0=u0, h=h, tail_h=tail_h):
            base = simulate(geom, x0, u0, grid, rng, None, len(ids), int(ids[0]))
            out = {"R_mean_eps": np.exp(girsanov_weight(base, h, mean_eps).log_value)}
            out["R_tail"] = np.exp(girsanov_weight(base, tail_h, 1.0).log_value)
            for i, e in enumerate(eps_list):
                logw = girsanov_weight(base, h, e).log_value
                pert = perturb(base, h, e)
                out[f"logw{i}"] = logw
                for k in probe_times:
                    node = grid.index_of(k)
                    out[f"xb{i}_{node}"] = base.x[:, node]
                    out[f"xp{i}_{node}"] = pert.x[:, node]
            return out

        res = _ensemble(geom, grid, n_paths, batch, first_stream=first, weight=3.0)
        rep.z_test(f"{geom.name}:E_R-1[linear]", res["R_mean_eps"] - 1.0, epsilon=mean_eps)
        tails = tail_expectation(res["R_tail"], (2.0, 5.0, 10.0, 20.0))
        for m, v in zip((2.0, 5.0, 10.0, 20.0), tails):
            rep.info(f"{geom.name}:E_R_1{{R>{m:g}}}[adapted-tanh]", Estimate.exact(float(v), n_paths), epsilon=1.0)
        for i, e in enumerate(eps_list):
            logw = res[f"logw{i}"]
            w = np.exp(logw)
            ess = effective_sample_size(w)
            rep.z_test(f"{geom.name}:E_R-1", w - 1.0, epsilon=e)
            rep.info(f"{geom.name}:ess_fraction", Estimate.exact(ess / n_paths, n_paths), epsilon=e)
            if ess < MIN_ESS_FRACTION * n_paths:
                rep.add(Row(f"{geom.name}:quasi_invariance", Estimate.exact(ess / n_paths, n_paths), math.nan, "inconclusive", e))
                continue
            base_m = {t: res[f"xb{i}_{grid.index_of(t)}"] for t in probe_times}
            pert_m = {t: res[f"xp{i}_{grid.index_of(t)}"] for t in probe_times}
            for pc in compare_marginals(base_m, pert_m, logw):
                tag = f"{geom.name}:t={pc.time:g}:x{pc.coordinate}"
                rep.check(f"{tag}:weighted_ks", pc.ks, pc.ks <= pc.ks_threshold, n_paths, statistical=True, epsilon=e)
                rep.info(f"{tag}:ks_threshold", Estimate.exact(pc.ks_threshold, n_paths), epsilon=e)
                z1 = pc.mean_diff / pc.mean_se if pc.mean_se > 0 else 0.0
                z2 = pc.second_moment_diff / pc.second_moment_se if pc.second_moment_se > 0 else 0.0
                rep.add(Row(f"{tag}:mean_diff", Estimate(pc.mean_diff, pc.mean_se, n_paths), z1, _verdict(abs(z1) <= Z_CRIT, n_paths), e))
                rep.add(Row(f"{tag}:second_moment_diff", Estimate(pc.second_moment_diff, pc.second_moment_se, n_paths), z2, _verdict(abs(z2) <= Z_CRIT, n_paths), e))
            if isinstance(geom, HalfLine):
                xT = res[f"xb{i}_{grid.n_steps}"][:, 0]
                ref = oracles.reflected_drift_mean(float(x0[0]), e, T) - PROJECTION_BIAS * math.sqrt(grid.dt)
                est = Estimate.from_samples(w * xT)
                rep.info(f"{geom.name}:reflected_drift_oracle", Estimate.exact(ref), epsilon=e)
                rep.add(Row(f"{geom.name}:weighted_mean_X_T-oracle", est, est.z(ref), _verdict(abs(est.z(ref)) <= Z_CRIT, n_paths), e))
    return rep


# --- acceptance suite -------------------------------------------------------------

SuiteEntry = tuple[int, str, Callable[..., ExperimentReport], dict]

SUITE: list[SuiteEntry] = [
    (1, "local time calibration", local_time_check, {}),
    (2, "1D Q exactness", q_exactness_check, {}),
    (3, "Q convergence and annihilation", q_convergence_check, {}),
    (4, "cocycle and norm bounds", cocycle_norm_check, {}),
    (5, "integration by parts: interval", ibp_check, {"geometry": "interval"}),
    (5, "integration by parts: disk", ibp_check, {"geometry": "disk"}),
    (5, "integration by parts: hemisphere", ibp_check, {"geometry": "hemisphere"}),
    (6, "Bismut formula: half-line", bismut_check, {"geometry": "halfline"}),
    (6, "Bismut formula: disk", bismut_check, {"geometry": "disk", "f": "square:0"}),
    (7, "martingale property", martingale_check, {}),
    (8, "Clark-Ocone representation", clark_ocone_check, {}),
    (9, "log-Sobolev: interval", lsi_check, {"geometry": "interval"}),
    (9, "log-Sobolev: hemisphere", lsi_check, {"geometry": "hemisphere"}),
    (10, "one-dimensional counterexample", counterexample_demo, {}),
    (11, "Girsanov and quasi-invariance", girsanov_check, {}),
]


def run_suite(seed: int = 42, n_paths: int | None = None, only: Sequence[int] | None = None, progress: Callable[[str], None] | None = None) -> list[tuple[int, str, ExperimentReport]]:
    """Run the acceptance battery; ``n_paths`` overrides every ensemble size."""
    out = []
    for crit, label, fn, kw in SUITE:
        if only is not None and crit not in only:
            continue
        args = dict(kw, seed=seed)
        if n_paths is not None:
            args["n_paths"] = n_paths
        if progress is not None:
            progress(f"criterion {crit}: {label}")
        out.append((crit, label, fn(**args)))
    return out


def combine_status(statuses: Sequence[str]) -> str:
    if "fail" in statuses:
        return "fail"
    if "inconclusive" in statuses:
        return "inconclusive"
    return "pass"
