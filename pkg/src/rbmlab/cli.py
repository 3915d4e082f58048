"""Command-line driver: ``rbmlab <experiment> [flags]``.

Exit status is 0 when every criterion passes (or is inconclusive), 1 when a
criterion fails and 2 for configuration errors.  A ``--config`` file holds
``key = value`` lines; flags given on the command line override it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .geometry import GEOMETRY_NAMES, GeometryError, make_geometry
from .gradient import make_direction
from .pathsim import TimeGrid, simulate
from .streams import RandomSource

EXPERIMENTS = ("simulate", "ibp", "bismut", "martingale", "clarkocone", "lsi", "counterexample", "qcheck", "girsanov", "suite")
EXPERIMENT_HELP = {
    "simulate": "simulate paths and write one path as CSV",
    "ibp": "integration-by-parts battery",
    "bismut": "Bismut gradient estimator against an oracle or finite difference",
    "martingale": "martingale property of the damped semigroup gradient",
    "clarkocone": "Clark-Ocone residual on the half-line",
    "lsi": "log-Sobolev battery",
    "counterexample": "one-dimensional flow quotient against the damped gradient",
    "qcheck": "multiplicative functional exactness, convergence, cocycle and bounds",
    "girsanov": "Girsanov weights and quasi-invariance",
    "suite": "full acceptance battery (criteria 1-11)",
}
NEEDS_GEOMETRY = {"simulate", "ibp", "bismut", "martingale", "clarkocone", "lsi"}

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    experiment: str
    geometry: str | None = None
    T: float = 1.0
    n_steps: int | None = None
    dt: float | None = None
    n_paths: int | None = None
    seed: int = 42
    f: str | None = None
    h: str | None = None
    x0: list[float] | None = None
    epsilon: list[float] = field(default_factory=list)
    out: str | None = None
    json: str | None = None

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; valid: {', '.join(EXPERIMENTS)}")
        if self.experiment in NEEDS_GEOMETRY and not self.geometry:
            raise ConfigError(f"{self.experiment} needs a geometry; valid: {', '.join(GEOMETRY_NAMES)}")
        if self.geometry:
            make_geometry(self.geometry)
        if self.n_paths is not None and self.n_paths < 100:
            raise ConfigError("n_paths must be at least 100")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        if self.n_steps is not None and self.n_steps < 1:
            raise ConfigError("n_steps must be positive")
        if self.dt is not None and self.n_steps is not None and not math.isclose(self.T / self.n_steps, self.dt, rel_tol=1e-9):
            raise ConfigError("dt and n_steps disagree")
        step = self.step
        if step is not None and step > 1e-2:
            raise ConfigError("dt must be at most 1e-2")
        if any(e <= 0 for e in self.epsilon):
            raise ConfigError("epsilon values must be positive")

    @property
    def step(self) -> float | None:
        if self.dt is not None:
            return self.dt
        if self.n_steps is not None:
            return self.T / self.n_steps
        return None

    def echo(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ("out", "json")}


_FLOAT_KEYS = {"T", "dt"}
_INT_KEYS = {"n_steps", "n_paths", "seed"}


def _coerce(key: str, value: str):
    try:
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _INT_KEYS:
            return int(float(value)) if "e" in value.lower() else int(value)
        if key == "epsilon":
            return [float(v) for v in value.replace(",", " ").split()]
        if key == "x0":
            return [float(v) for v in value.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def read_config_file(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    known = {f for f in RunConfig.__dataclass_fields__}
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbmlab", description="Reflecting Brownian motion verification lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="experiment", metavar="experiment", help=", ".join(EXPERIMENTS))
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=EXPERIMENT_HELP[name])
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--geometry", help=f"one of {', '.join(GEOMETRY_NAMES)}")
        p.add_argument("--T", type=float, dest="T")
        p.add_argument("--n-steps", type=int, dest="n_steps")
        p.add_argument("--dt", type=float)
        p.add_argument("--n-paths", type=lambda v: int(float(v)), dest="n_paths")
        p.add_argument("--seed", type=int)
        p.add_argument("--epsilon", type=float, action="append", help="repeatable")
        p.add_argument("--f", help="cylindrical function, e.g. coord:0@t=1")
        p.add_argument("--h", help="direction, e.g. linear or adapted-sgn")
        p.add_argument("--x0", help="comma-separated starting point")
        p.add_argument("--out", help="CSV output path")
        p.add_argument("--json", help="JSON summary path")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {"experiment": args.experiment}
    if args.config:
        values.update(read_config_file(args.config))
        values["experiment"] = args.experiment
    for key in ("geometry", "T", "n_steps", "dt", "n_paths", "seed", "f", "h", "out", "json"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.epsilon:
        values["epsilon"] = list(args.epsilon)
    if args.x0 is not None:
        values["x0"] = _coerce("x0", args.x0)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _kw(cfg: RunConfig, **extra) -> dict:
    out = {"seed": cfg.seed}
    if cfg.n_paths is not None:
        out["n_paths"] = cfg.n_paths
    if cfg.step is not None:
        out["dt"] = cfg.step
    out.update({k: v for k, v in extra.items() if v is not None})
    return out


def run_experiment(cfg: RunConfig) -> list[ex.ExperimentReport]:
    """Dispatch one non-suite experiment."""
    name = cfg.experiment
    if name == "ibp":
        battery = [(cfg.f, cfg.h or "linear")] if cfg.f else None
        return [ex.ibp_check(cfg.geometry, battery, **_kw(cfg, eps_list=tuple(cfg.epsilon) or None, T=cfg.T, x0=cfg.x0))]
    if name == "bismut":
        return [ex.bismut_check(cfg.geometry, **_kw(cfg, f=cfg.f, t=cfg.T, x0=cfg.x0))]
    if name == "martingale":
        return [ex.martingale_check(cfg.geometry, **_kw(cfg, f=cfg.f, t=cfg.T, x0=cfg.x0[0] if cfg.x0 else None))]
    if name == "clarkocone":
        return [ex.clark_ocone_check(cfg.geometry, **_kw(cfg, f=cfg.f, T=cfg.T, x0=cfg.x0[0] if cfg.x0 else None))]
    if name == "lsi":
        return [ex.lsi_check(cfg.geometry, [cfg.f] if cfg.f else None, **_kw(cfg, T=cfg.T))]
    if name == "counterexample":
        eps = cfg.epsilon[0] if cfg.epsilon else None
        return [ex.counterexample_demo(**_kw(cfg, eps=eps))]
    if name == "qcheck":
        kw = _kw(cfg, T=cfg.T)
        reports = [ex.q_exactness_check(**kw)]
        reports.append(ex.q_convergence_check(geometry=cfg.geometry or "disk", **kw))
        reports.append(ex.cocycle_norm_check(**kw))
        return reports
    if name == "girsanov":
        geoms = (cfg.geometry,) if cfg.geometry else None
        return [ex.girsanov_check(**_kw(cfg, T=cfg.T, eps_list=tuple(cfg.epsilon) or None, geometries=geoms))]
    raise ConfigError(f"unknown experiment {name!r}")


def run_simulate(cfg: RunConfig) -> ex.ExperimentReport:
    geom = make_geometry(cfg.geometry)
    grid = TimeGrid(cfg.T, cfg.n_steps) if cfg.n_steps else TimeGrid.from_dt(cfg.T, cfg.step or 1e-3)
    n_paths = cfg.n_paths or 1000
    x0, u0 = ex._start(geom, cfg.x0)
    drift = None
    eps = cfg.epsilon[0] if cfg.epsilon else 0.0
    if cfg.h and eps:
        drift = make_direction(cfg.h, geom.dim, cfg.T).drift(eps)
    paths = simulate(geom, x0, u0, grid, RandomSource(cfg.seed), drift, n_paths, 0)
    rep = ex.ExperimentReport("simulate", geom.name, dict(cfg.echo(), n_paths=n_paths, dt=grid.dt))
    rep.info("local_time_T", ex.Estimate.from_samples(paths.dl.sum(axis=1)), epsilon=eps or math.nan)
    rep.info("contact_fraction", ex.Estimate.from_samples(paths.contact.mean(axis=1)), epsilon=eps or math.nan)
    dist = geom.boundary_distance(paths.x)
    rep.check("min_boundary_distance", float(np.min(dist)), bool(np.min(dist) >= -1e-12), n_paths)
    if cfg.out:
        paths.to_csv(cfg.out, 0)
    return rep


def write_csv(reports, path: str | None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ex.CSV_HEADER)
    for r in reports:
        w.writerows(r.csv_rows())
    text = buf.getvalue()
    if path:
        Path(path).write_text(text)
    return text


def write_json(payload: dict, path: str | None) -> str:
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"
    if path:
        Path(path).write_text(text)
    return text


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    raise TypeError(f"not JSON serialisable: {type(v)}")


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def _summary(cfg: RunConfig, groups) -> dict:
    return _clean({
        "version": __version__,
        "config": cfg.echo(),
        "criteria": [
            {"criterion": crit, "label": label, "status": rep.status, "report": rep.to_dict()}
            for crit, label, rep in groups
        ],
        "status": ex.combine_status([rep.status for _, _, rep in groups]),
    })


def _exit_for(status: str) -> int:
    if status == "fail":
        return EXIT_FAIL
    if status == "inconclusive":
        print("warning: some criteria are inconclusive (ensemble too small to falsify)", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if not args.experiment:
        parser.print_usage(sys.stderr)
        print(f"rbmlab: choose an experiment: {', '.join(EXPERIMENTS)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve_config(args)
        if cfg.experiment == "suite":
            groups = ex.run_suite(cfg.seed, cfg.n_paths, progress=lambda m: print(m, file=sys.stderr))
        elif cfg.experiment == "simulate":
            groups = [(0, "simulate", run_simulate(cfg))]
        else:
            groups = [(0, cfg.experiment, r) for r in run_experiment(cfg)]
    except (ConfigError, GeometryError, ValueError) as exc:
        print(f"rbmlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    reports = [rep for _, _, rep in groups]
    if cfg.experiment != "simulate" or not cfg.out:
        text = write_csv(reports, None if cfg.experiment == "simulate" else cfg.out)
        if not cfg.out:
            sys.stdout.write(text)
    summary = _summary(cfg, groups)
    if cfg.json:
        write_json(summary, cfg.json)
    for crit, label, rep in groups:
        tag = f"criterion {crit}" if crit else rep.experiment
        print(f"{tag:>14} {rep.status.upper():<12} {label} [{rep.geometry}]", file=sys.stderr)
    return _exit_for(summary["status"])


if __name__ == "__main__":
    sys.exit(main())
