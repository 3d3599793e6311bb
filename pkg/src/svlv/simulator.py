"""Exact event-driven simulation of voter models and their perturbations.

Public surface:

* :func:`simulate` runs the fastest available backend on a fresh initial
  configuration and returns a :class:`RunResult`.
* :func:`run_biased_voter` does the same for the biased voter chain.
* :func:`coupled_run` drives the perturbed chain, a slowed plain voter
  and the dominating biased voter from one shared event stream and
  checks pathwise domination at every flip.
* :class:`EventEngine` is the inspectable single-step facade used by the
  correctness tests (brute-force rate scans, active-set completeness);
  it always runs the pure-Python backend so its internals stay visible.

Sites are d-tuples of lattice integers, never rescaled inside the
engines; measure-level rescaling lives in :mod:`svlv.observables`.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from ._errors import EngineError
from ._pack import (KIND_BIASED, KIND_LV, KIND_TABLE, KIND_VOTER, ModelPack,
                    pack_biased, pack_coupled, pack_lv, pack_table, pack_voter)
from .kernels import KernelSpec, ScalingParams
from .perturbation import PerturbationTable, kernel_fingerprint

DEFAULT_MAX_STEPS = 100_000_000

GENERATORS = ("sites", "box", "ball", "bernoulli", "count")


@dataclass(frozen=True)
class Configuration:
    """Finite set of occupied lattice sites."""

    occupied: frozenset
    d: int
    scaling: ScalingParams = None

    @classmethod
    def from_sites(cls, sites, d, scaling=None):
        occ = frozenset(tuple(int(c) for c in s) for s in sites)
        for s in occ:
            if len(s) != d:
                raise ValueError(f"site {s} is not {d}-dimensional")
        return cls(occupied=occ, d=d, scaling=scaling)

    @property
    def size(self):
        return len(self.occupied)

    def sorted_sites(self):
        return sorted(self.occupied)

    def as_array(self):
        sites = self.sorted_sites()
        return np.array(sites, dtype=np.int64).reshape(len(sites), self.d)


def _sites_list(init, d):
    if isinstance(init, Configuration):
        return init.sorted_sites()
    sites = sorted(set(tuple(int(c) for c in s) for s in init))
    for s in sites:
        if len(s) != d:
            raise ValueError(f"site {s} is not {d}-dimensional")
    return sites


# -- initial-configuration generators --------------------------------------


def box_sites(d, lo, hi):
    """Every site of the box [lo, hi]^d (inclusive, per-axis bounds ok)."""
    lo = np.broadcast_to(np.asarray(lo, dtype=np.int64), (d,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.int64), (d,))
    axes = [np.arange(l, h + 1, dtype=np.int64) for l, h in zip(lo, hi)]
    grid = np.meshgrid(*axes, indexing="ij")
    return [tuple(int(g[idx]) for g in grid)
            for idx in np.ndindex(*grid[0].shape)]


def ball_sites(d, radius, center=None):
    """Sites within Euclidean distance ``radius`` of the center."""
    c = (0,) * d if center is None else tuple(int(v) for v in center)
    r = int(np.floor(radius))
    out = []
    for s in box_sites(d, [ci - r for ci in c], [ci + r for ci in c]):
        if sum((a - b) ** 2 for a, b in zip(s, c)) <= radius * radius:
            out.append(s)
    return out


def bernoulli_sites(d, lo, hi, p_fill, seed):
    """Independent density-``p_fill`` fill of the box, own RNG stream."""
    if not 0.0 <= p_fill <= 1.0:
        raise ValueError("fill probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    cells = box_sites(d, lo, hi)
    keep = rng.random(len(cells)) < p_fill
    return [s for s, k in zip(cells, keep) if k]


def count_sites(d, lo, hi, count, seed):
    """Exactly ``count`` distinct sites uniform on the box, own RNG stream."""
    cells = box_sites(d, lo, hi)
    if count > len(cells):
        raise ValueError(f"box holds {len(cells)} sites, asked for {count}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(cells), size=count, replace=False)
    return [cells[i] for i in sorted(idx)]


def initial_sites_from_spec(spec, d):
    """Build an initial configuration from its JSON-able description.

    Accepted forms: a plain list of sites, {"sites": [...]}, or
    {"generator": "box"|"ball"|"bernoulli"|"count", ...} with generator
    parameters and (for the random ones) a "seed" of their own.
    """
    if isinstance(spec, (list, tuple)):
        return sorted(set(tuple(int(c) for c in s) for s in spec))
    if "sites" in spec:
        return sorted(set(tuple(int(c) for c in s) for s in spec["sites"]))
    gen = spec.get("generator")
    if gen == "box":
        return sorted(box_sites(d, spec["lo"], spec["hi"]))
    if gen == "ball":
        return sorted(ball_sites(d, spec["radius"], spec.get("center")))
    if gen == "bernoulli":
        return sorted(bernoulli_sites(d, spec["lo"], spec["hi"],
                                      spec["p"], spec["seed"]))
    if gen == "count":
        return count_sites(d, spec["lo"], spec["hi"], spec["count"],
                           spec["seed"])
    raise ValueError(f"unknown initial-configuration generator {gen!r}")


def load_initial_sites(path, d):
    with open(path) as fh:
        return initial_sites_from_spec(json.load(fh), d)


# -- run results ------------------------------------------------------------


@dataclass
class RunResult:
    """Summary of one trajectory; integrals are exact along the path."""

    d: int
    time: float
    events: int
    steps: int
    absorbed: bool
    final_sites: np.ndarray
    mass_grid: np.ndarray
    int_mass: float
    int_f0: float = 0.0
    int_vf1: float = 0.0
    int_d2num: float = 0.0
    int_d3num: float = 0.0
    int_qv2num: float = 0.0
    log_t: np.ndarray = None
    log_site: np.ndarray = None
    log_val: np.ndarray = None
    backend: str = ""

    @property
    def n_occ(self):
        return len(self.final_sites)

    def final_config(self, scaling=None):
        return Configuration.from_sites(map(tuple, self.final_sites), self.d,
                                        scaling)

    @classmethod
    def from_raw(cls, d, raw, backend):
        return cls(
            d=d, time=raw["time"], events=raw["events"], steps=raw["steps"],
            absorbed=raw["absorbed"], final_sites=raw["final_sites"],
            mass_grid=raw["mass_grid"], int_mass=raw["int_mass"],
            int_f0=raw.get("int_f0", 0.0), int_vf1=raw.get("int_vf1", 0.0),
            int_d2num=raw.get("int_d2num", 0.0),
            int_d3num=raw.get("int_d3num", 0.0),
            int_qv2num=raw.get("int_qv2num", 0.0),
            log_t=raw.get("log_t"), log_site=raw.get("log_site"),
            log_val=raw.get("log_val"), backend=backend,
        )


@dataclass
class CoupledRunResult:
    """Summary of one three-process coupled trajectory."""

    d: int
    time: float
    events: int
    steps: int
    absorbed: bool
    dom_checks: int
    final_sites: np.ndarray
    final_sites_hat: np.ndarray
    final_sites_bar: np.ndarray
    mass_grid: np.ndarray
    mass_grid_hat: np.ndarray
    mass_grid_bar: np.ndarray
    int_mass: float
    int_mass_hat: float
    int_mass_bar: float
    backend: str = ""

    @property
    def n_occ(self):
        return len(self.final_sites)


# -- model dispatch ---------------------------------------------------------


def _build_pack(kernel, model, N, domain):
    """Translate a model description into a ModelPack.

    ``model`` is "voter", ("lv", theta0, theta1), or a PerturbationTable.
    Competition tables generated by lv_table carry their parameters and
    are run through the closed-form competition rates; foreign tables go
    through the generic per-entry scan.
    """
    if model == "voter" or model is None:
        return pack_voter(kernel, N, domain=domain)
    if isinstance(model, tuple) and model and model[0] == "lv":
        _, theta0, theta1 = model
        return pack_lv(kernel, N, theta0, theta1, domain=domain)
    if isinstance(model, PerturbationTable):
        lv = model.lv
        if lv is not None and lv.kernel_fp == kernel_fingerprint(kernel):
            return pack_lv(kernel, N, lv.theta0, lv.theta1, domain=domain)
        return pack_table(kernel, N, model, domain=domain)
    raise ValueError(f"unrecognized model description {model!r}")


def _pack_max_offset(pack):
    """Largest absolute offset coordinate any engine step can take."""
    m = 0
    for arr in (pack.act_offs, pack.k_offsets, pack.k2_offsets):
        if arr is not None and len(arr):
            m = max(m, int(np.max(np.abs(arr))))
    return m


def _pick_engine(pack, kernel, engine):
    if engine not in ("auto", "direct", "thinning"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine == "auto":
        wide = kernel.M_N > 4
        if wide and pack.kind in (KIND_VOTER, KIND_LV):
            return "thinning"
        return "direct"
    if engine == "thinning" and pack.kind not in (KIND_VOTER, KIND_LV):
        raise EngineError("thinning engine supports voter and competition runs")
    return engine


def _resolve_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def seed_streams(master_seed, n):
    """n independent generators split from one master seed."""
    return [np.random.default_rng(s)
            for s in np.random.SeedSequence(master_seed).spawn(n)]


def simulate(kernel: KernelSpec, model, init, t_end, *, N, rng,
             grid=(), engine="auto", domain=None, track_qv=False,
             record_log=False, max_steps=DEFAULT_MAX_STEPS,
             selection="tree") -> RunResult:
    """Run one trajectory from a fresh initial configuration.

    ``grid`` is a nondecreasing sequence of times in [0, t_end]; the
    occupied count is recorded at each (value held from just before the
    first event after the grid time).  ``selection="lex"`` switches the
    direct engine to deterministic lexicographic site selection, used by
    the dense-oracle identity tests.
    """
    pack = _build_pack(kernel, model, N, domain)
    sites = _sites_list(init, kernel.d)
    rng = _resolve_rng(rng)
    which = _pick_engine(pack, kernel, engine)
    mod = _backend.backend_for(pack.d, _pack_max_offset(pack))
    if which == "thinning":
        raw = mod.run_thinning(pack, sites, rng, float(t_end),
                               np.asarray(grid, dtype=float), int(max_steps),
                               track_qv, record_log)
    else:
        raw = mod.run_direct(pack, sites, rng, float(t_end),
                             np.asarray(grid, dtype=float), int(max_steps),
                             track_qv, record_log, selection)
    return RunResult.from_raw(kernel.d, raw, mod.BACKEND_NAME)


def run_biased_voter(kernel: KernelSpec, bias_kernel, init, t_end, *,
                     v, b, rng, grid=(), domain=None,
                     record_log=False, max_steps=DEFAULT_MAX_STEPS,
                     selection="tree") -> RunResult:
    """Biased voter chain: births v*f1 + b*fb1, deaths v*f0.

    ``bias_kernel`` supplies the extra-birth step law: a KernelSpec, an
    (offsets, probs) pair, or an {offset: prob} dict.  It need not be
    symmetric.
    """
    if isinstance(bias_kernel, KernelSpec):
        b_offs, b_probs = bias_kernel.offsets_array(), bias_kernel.probs
    elif isinstance(bias_kernel, dict):
        items = sorted(bias_kernel.items())
        b_offs = np.array([o for o, _ in items], dtype=np.int64)
        b_probs = np.array([p for _, p in items], dtype=float)
    else:
        b_offs, b_probs = bias_kernel
    pack = pack_biased(kernel, v, b, b_offs, b_probs, domain=domain)
    sites = _sites_list(init, kernel.d)
    rng = _resolve_rng(rng)
    mod = _backend.backend_for(pack.d, _pack_max_offset(pack))
    raw = mod.run_direct(pack, sites, rng, float(t_end),
                         np.asarray(grid, dtype=float), int(max_steps),
                         False, record_log, selection)
    return RunResult.from_raw(kernel.d, raw, mod.BACKEND_NAME)


def coupled_run(kernel: KernelSpec, table, init, t_end, *, N, rng,
                grid=(), k_delta=None,
                max_steps=DEFAULT_MAX_STEPS) -> CoupledRunResult:
    """Drive (perturbed, slowed voter, dominating biased voter) jointly.

    All three start from the same configuration.  A domination breach
    raises DominationError; it indicates a construction bug and is never
    expected.
    """
    if not isinstance(table, PerturbationTable):
        raise ValueError("coupled_run needs a PerturbationTable")
    pack = pack_coupled(kernel, N, table, k_delta=k_delta)
    sites = _sites_list(init, kernel.d)
    rng = _resolve_rng(rng)
    mod = _backend.backend_for(pack.d, _pack_max_offset(pack))
    raw = mod.run_coupled(pack, sites, rng, float(t_end),
                          np.asarray(grid, dtype=float), int(max_steps))
    return CoupledRunResult(
        d=kernel.d, time=raw["time"], events=raw["events"],
        steps=raw["steps"], absorbed=raw["absorbed"],
        dom_checks=raw["dom_checks"], final_sites=raw["final_sites"],
        final_sites_hat=raw["final_sites_hat"],
        final_sites_bar=raw["final_sites_bar"],
        mass_grid=raw["mass_grid"], mass_grid_hat=raw["mass_grid_hat"],
        mass_grid_bar=raw["mass_grid_bar"], int_mass=raw["int_mass"],
        int_mass_hat=raw["int_mass_hat"], int_mass_bar=raw["int_mass_bar"],
        backend=mod.BACKEND_NAME,
    )


# -- stepping facade --------------------------------------------------------


@dataclass(frozen=True)
class Event:
    time: float
    site: tuple
    new_value: int


class EventEngine:
    """Single-step view of the direct engine (always pure Python).

    Exposes the internals the correctness tests need: per-site cached
    rates, the active set, and the running total.  ``step`` advances by
    exactly one flip; on a trap configuration it returns None without
    advancing time.
    """

    def __init__(self, kernel, model, init, *, N, rng, domain=None,
                 track_qv=False, selection="tree"):
        from . import _core_py
        self.kernel = kernel
        self.pack = _build_pack(kernel, model, N, domain)
        self.rng = _resolve_rng(rng)
        sites = _sites_list(init, kernel.d)
        self._eng = _core_py.DirectEngine(self.pack, sites,
                                          track_qv=track_qv,
                                          selection=selection)
        self.events_seen = 0

    @property
    def time(self):
        return self._eng.time

    @property
    def absorbed(self):
        return self._eng.absorbed

    def configuration(self):
        return Configuration.from_sites(self._eng.occupied_sites(),
                                        self.pack.d)

    def active_sites(self):
        e = self._eng
        return sorted(e.slot_site[s] for s in range(len(e.slot_site))
                      if e.ref[s] != 0)

    def cached_rates(self):
        """site -> cached flip rate over the active set."""
        e = self._eng
        return {e.slot_site[s]: e.rate[s] for s in range(len(e.slot_site))
                if e.ref[s] != 0}

    def total_rate(self):
        return self._eng.tree.total()

    def step(self, t_max=float("inf")):
        out = self._eng.step_once(self.rng, t_max)
        if out is None:
            return None
        self.events_seen += 1
        t, site, val = out
        return Event(time=t, site=site, new_value=val)

    def run(self, t_end, observers=(), max_steps=DEFAULT_MAX_STEPS):
        """Step to t_end, feeding each event to every observer in order."""
        from ._errors import BudgetError
        while True:
            if self._eng.steps >= max_steps:
                raise BudgetError(
                    f"event budget {max_steps} exceeded at t={self.time!r}")
            ev = self.step(t_end)
            if ev is None:
                break
            for obs in observers:
                obs(ev)
        if not self.absorbed:
            # step_once already pinned time to t_end
            pass
        return {
            "time": self.time,
            "events": self.events_seen,
            "absorbed": self.absorbed,
            "final": self.configuration(),
        }


# -- event-log round trip ---------------------------------------------------


def write_event_log(path, result: RunResult):
    """CSV event log: time, site coordinates, new value."""
    d = result.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *[f"x{i}" for i in range(d)], "new_value"])
        for t, site, val in zip(result.log_t, result.log_site, result.log_val):
            w.writerow([f"{t:.17g}", *[int(c) for c in site], int(val)])


def read_event_log(path):
    """Inverse of write_event_log: (times, sites, values) arrays."""
    with open(path) as fh:
        r = csv.reader(fh)
        header = next(r)
        d = len(header) - 2
        ts, sites, vals = [], [], []
        for row in r:
            ts.append(float(row[0]))
            sites.append(tuple(int(c) for c in row[1:1 + d]))
            vals.append(int(row[-1]))
    return (np.array(ts, dtype=float),
            np.array(sites, dtype=np.int64).reshape(len(sites), d),
            np.array(vals, dtype=np.int8))
