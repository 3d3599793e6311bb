"""Experiment configuration: one file drives every harness command.

TOML and JSON parse to the same ``ExperimentConfig``.  Layout::

    [model]
    d = 3
    kernel = "nearest"        # or {variant="long_range", M_N=4}
                              # or {variant="fixed", table=[[[1,0,0], 0.5], ...]}
    type = "lv"               # "voter" | "lv" | "table"
    theta0 = 6.0              # lv only (per-N perturbation coefficients)
    theta1 = 0.0
    entries = [ ... ]         # table only: {offsets=[[...]], beta=, delta=}
    n_ladder = [25, 100, 400]
    initial = {generator = "box", lo = 0, hi = 3}   # or {sites = [...]}

    [run]
    horizon = 1.0
    replicas = 200
    budget = 100000000        # event budget per replica
    grid_points = 11          # mass-recording times on [0, horizon]
    record_logs = false       # write per-replica event logs from cmd_simulate

    [analysis]
    test_functions = ["constant", "gaussian", "indicator", "schedule"]
    extent = 3.0              # spatial scale of the audit catalog
    eps_exponent = 0.25       # collision window eps*_N = N^-eps_exponent
    walk_reps = 100000        # replicates for gamma_e / beta / delta
    walk_horizon = 8.0        # base horizon of the escape ladder
    sigma_reps = 20000        # replicates per sigma_N(A) estimate
    alpha = 0.05              # level for trend/CI verdicts
    min_pooled = 100          # below this, verdicts read "insufficient replicas"
    decomposition_n = 0       # N used by the decomposition audit (0 = ladder[0])

Seed discipline: each command receives one master seed on the command
line and derives independent replica streams with seed_streams (child k
of the spawned SeedSequence); replicas are indexed ladder-major, so
stream k serves replica k % R of ladder entry k // R.  Reruns with the
same config and seed are byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import tomli

from .kernels import (build_fixed_kernel, build_long_range_kernel,
                      nearest_neighbor_kernel)
from .perturbation import PerturbationTable, empty_table, lv_table
from .simulator import initial_sites_from_spec

__all__ = ["ConfigError", "ModelConfig", "RunConfig", "AnalysisConfig",
           "ExperimentConfig", "load_config", "parse_config"]

CATALOG_NAMES = ("constant", "gaussian", "indicator", "schedule")


class ConfigError(ValueError):
    pass


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _kernel_from_spec(d, spec):
    if spec in ("nearest", "nn", None):
        return nearest_neighbor_kernel(d)
    if isinstance(spec, dict):
        variant = spec.get("variant")
        if variant == "long_range":
            return build_long_range_kernel(d, int(spec["M_N"]))
        if variant == "fixed":
            table = [(tuple(int(c) for c in off), float(p))
                     for off, p in spec["table"]]
            return build_fixed_kernel(d, table)
        raise ConfigError(f"unknown kernel variant {variant!r}")
    raise ConfigError(f"unrecognized kernel spec {spec!r}")


def _table_from_entries(d, entries):
    merged = {}
    for ent in entries:
        key = tuple(tuple(int(c) for c in off) for off in ent["offsets"])
        b = float(ent.get("beta", 0.0))
        dl = float(ent.get("delta", 0.0))
        b0, d0 = merged.get(key, (0.0, 0.0))
        merged[key] = (b0 + b, d0 + dl)
    return PerturbationTable(d, merged)


@dataclass(frozen=True)
class ModelConfig:
    d: int
    kernel: object
    kind: str                  # "voter" | "lv" | "table"
    theta0: float
    theta1: float
    table: PerturbationTable
    n_ladder: tuple
    initial: object

    def simulate_model(self):
        """The model argument accepted by simulate()."""
        if self.kind == "voter":
            return "voter"
        if self.kind == "lv":
            return ("lv", self.theta0, self.theta1)
        return self.table

    def effective_table(self):
        """Perturbation table for estimators and the coupling."""
        if self.kind == "voter":
            return empty_table(self.d)
        if self.kind == "lv":
            return lv_table(self.kernel, self.theta0, self.theta1)
        return self.table

    def initial_sites(self):
        return initial_sites_from_spec(self.initial, self.d)


@dataclass(frozen=True)
class RunConfig:
    horizon: float
    replicas: int
    budget: int
    grid_points: int
    record_logs: bool


@dataclass(frozen=True)
class AnalysisConfig:
    test_functions: tuple
    extent: float
    eps_exponent: float
    walk_reps: int
    walk_horizon: float
    sigma_reps: int
    alpha: float
    min_pooled: int
    decomposition_n: int

    def eps_star(self, N):
        return float(N) ** (-self.eps_exponent)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    run: RunConfig
    analysis: AnalysisConfig
    raw: dict = field(repr=False, default_factory=dict)

    def echo(self):
        """Config as parsed, for embedding in reports."""
        return self.raw


def parse_config(doc):
    """Validate a parsed TOML/JSON document into ExperimentConfig."""
    _require(isinstance(doc, dict), "config root must be a table")
    m = doc.get("model")
    _require(isinstance(m, dict), "missing [model] block")
    try:
        d = int(m["d"])
    except KeyError:
        raise ConfigError("model.d is required") from None
    _require(d >= 1, "model.d must be >= 1")
    kernel = _kernel_from_spec(d, m.get("kernel"))
    kind = m.get("type", "voter")
    _require(kind in ("voter", "lv", "table"),
             f"model.type must be voter|lv|table, got {kind!r}")
    theta0 = float(m.get("theta0", 0.0))
    theta1 = float(m.get("theta1", 0.0))
    if kind == "table":
        _require("entries" in m, "model.type=table needs model.entries")
        table = _table_from_entries(d, m["entries"])
    elif kind == "lv":
        table = lv_table(kernel, theta0, theta1)
    else:
        table = empty_table(d)
    ladder = tuple(int(n) for n in m.get("n_ladder", (100,)))
    _require(len(ladder) >= 1 and all(n >= 1 for n in ladder),
             "model.n_ladder needs positive entries")
    _require(all(b > a for a, b in zip(ladder, ladder[1:])),
             "model.n_ladder must be strictly increasing")
    initial = m.get("initial")
    _require(initial is not None, "model.initial is required")
    try:
        sites = initial_sites_from_spec(initial, d)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad model.initial: {exc}") from exc
    _require(len(sites) >= 1, "initial configuration is empty")
    model = ModelConfig(d=d, kernel=kernel, kind=kind, theta0=theta0,
                        theta1=theta1, table=table, n_ladder=ladder,
                        initial=initial)

    r = doc.get("run", {})
    _require(isinstance(r, dict), "[run] must be a table")
    horizon = float(r.get("horizon", 1.0))
    _require(horizon >= 0.0, "run.horizon must be >= 0")
    replicas = int(r.get("replicas", 1))
    _require(replicas >= 1, "run.replicas must be >= 1")
    budget = int(r.get("budget", 100_000_000))
    _require(budget >= 1, "run.budget must be >= 1")
    grid_points = int(r.get("grid_points", 11))
    _require(grid_points >= 2, "run.grid_points must be >= 2")
    run = RunConfig(horizon=horizon, replicas=replicas, budget=budget,
                    grid_points=grid_points,
                    record_logs=bool(r.get("record_logs", False)))

    a = doc.get("analysis", {})
    _require(isinstance(a, dict), "[analysis] must be a table")
    fns = tuple(a.get("test_functions", CATALOG_NAMES))
    for name in fns:
        _require(name in CATALOG_NAMES,
                 f"unknown test function {name!r} (choose from {CATALOG_NAMES})")
    _require(len(fns) >= 1, "analysis.test_functions is empty")
    eps_exp = float(a.get("eps_exponent", 0.25))
    _require(0.0 < eps_exp < 0.5,
             "eps exponent must sit in (0, 0.5): the collision window has "
             "to shrink, but slower than 1/sqrt(N)")
    analysis = AnalysisConfig(
        test_functions=fns,
        extent=float(a.get("extent", 3.0)),
        eps_exponent=eps_exp,
        walk_reps=int(a.get("walk_reps", 100_000)),
        walk_horizon=float(a.get("walk_horizon", 8.0)),
        sigma_reps=int(a.get("sigma_reps", 20_000)),
        alpha=float(a.get("alpha", 0.05)),
        min_pooled=int(a.get("min_pooled", 100)),
        decomposition_n=int(a.get("decomposition_n", 0)),
    )
    _require(analysis.extent > 0.0, "analysis.extent must be > 0")
    _require(analysis.walk_reps >= 1 and analysis.sigma_reps >= 1,
             "walk_reps and sigma_reps must be >= 1")
    _require(analysis.walk_horizon > 0.0, "walk_horizon must be > 0")
    _require(0.0 < analysis.alpha < 0.5, "alpha must sit in (0, 0.5)")
    return ExperimentConfig(model=model, run=run, analysis=analysis, raw=doc)


def load_config(path):
    """Parse a .toml or .json config file (sniffed by content if needed)."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if path.endswith(".json"):
        doc = json.loads(data)
    elif path.endswith(".toml"):
        try:
            doc = tomli.loads(data.decode("utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"bad TOML in {path}: {exc}") from exc
    else:
        try:
            doc = json.loads(data)
        except json.JSONDecodeError:
            try:
                doc = tomli.loads(data.decode("utf-8"))
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path} is neither JSON nor TOML: {exc}") \
                    from exc
    return parse_config(doc)
