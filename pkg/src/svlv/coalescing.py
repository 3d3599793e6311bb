"""Coalescing random walks and the limit constants they estimate.

Public surface:

* :class:`CoalescingSystem` — resumable labelled system; coalesced
  labels share one walker and merges are final.
* :class:`TauEstimate` — binomial estimate of a coalescence-time
  probability with its exact standard error.
* :func:`estimate_tau_leq` / :func:`estimate_sigma` — P(tau(A) <= t)
  for a finite point set A; the empty and singleton sets return 1.
* :func:`estimate_gamma_e` — two-walk escape probability by a common-
  path horizon ladder with sqrt-time extrapolation.
* :func:`estimate_beta_delta_coal` — paired three-walk tail constants
  from shared replicates, so beta_hat <= delta_hat holds pathwise.
* :func:`estimate_gamma_N` — rate-N non-coalescence by the cutoff time.
* :func:`assemble_theta` / :func:`theta_from_table` — drift assembly
  from perturbation weights and coalescence probabilities.
* :func:`duality_check` — voter-model expectation against the dual
  walk probability, gated by a two-proportion z-test.

Walkers live on the unscaled lattice; rates carry the scaling.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from .kernels import kernel_id
from .perturbation import PerturbationTable, chi
from .simulator import simulate
from .stats import binomial_se, two_proportion_z

SQRT2 = math.sqrt(2.0)


def _kernel_arrays(kernel):
    return np.asarray(kernel.cumsum(), dtype=float), kernel.offsets_array()


def _walk_backend(kernel, n_walkers):
    offs = kernel.offsets_array()
    m = int(np.abs(offs).max()) if len(offs) else 0
    return _backend.backend_for(kernel.d, m, n_walkers)


def _points(A, d):
    pts = [tuple(int(c) for c in p) for p in A]
    for p in pts:
        if len(p) != d:
            raise ValueError(f"point {p} is not {d}-dimensional")
    return sorted(set(pts))


def point_key(points):
    """Canonical dict key for a walker start set."""
    return tuple(sorted(tuple(int(c) for c in p) for p in points))


# -- estimates ---------------------------------------------------------------


@dataclass(frozen=True)
class TauEstimate:
    """Monte Carlo probability with binomial error bookkeeping.

    ``bracket`` carries (P(tau > 4T), P(tau > T)) when the estimate came
    from a horizon ladder; tail estimates at any finite horizon sit
    between the limit value and the bracket's upper end.
    """

    estimate: float
    se: float
    reps: int
    horizon: float
    bracket: tuple = None

    def record(self, constant, kernel=None, seed=None):
        rec = {
            "constant": constant,
            "estimate": float(self.estimate),
            "se": float(self.se),
            "horizon": float(self.horizon),
            "reps": int(self.reps),
        }
        if self.bracket is not None:
            rec["bracket"] = [float(v) for v in self.bracket]
        if kernel is not None:
            rec["kernel"] = kernel_id(kernel)
        if seed is not None:
            rec["seed"] = int(seed)
        return rec


def _from_hits(hits, reps, horizon):
    p = hits / reps
    return TauEstimate(estimate=p, se=binomial_se(p, reps), reps=reps,
                       horizon=float(horizon))


# -- the resumable system ----------------------------------------------------


class CoalescingSystem:
    """Labelled coalescing walks; classes jump as one, merges are final.

    Labels index the starting walkers.  Classes holding several labels
    carry one position; after every jump the landing class absorbs any
    class already on that site.  ``advance`` is exact event-driven
    execution, and a fully coalesced system keeps moving.
    """

    def __init__(self, positions, kernel, rate=1.0):
        if rate <= 0.0:
            raise ValueError("walk rate must be positive")
        self.kernel = kernel
        self.rate = float(rate)
        self.time = 0.0
        self._cum, self._offs = _kernel_arrays(kernel)
        pos = [tuple(int(c) for c in p) for p in positions]
        self._class_pos = []
        self._class_labels = []
        for i, p in enumerate(pos):
            # start-time coincidences merge immediately
            for ci, q in enumerate(self._class_pos):
                if q == p:
                    self._class_labels[ci].append(i)
                    break
            else:
                self._class_pos.append(p)
                self._class_labels.append([i])
        self.n_labels = len(pos)

    @property
    def n_classes(self):
        return len(self._class_pos)

    def classes(self):
        """List of (position, sorted labels) for the surviving classes."""
        return [(p, tuple(sorted(ls)))
                for p, ls in zip(self._class_pos, self._class_labels)]

    def position_of(self, label):
        for p, ls in zip(self._class_pos, self._class_labels):
            if label in ls:
                return p
        raise KeyError(f"unknown label {label}")

    def same_class(self, a, b):
        for ls in self._class_labels:
            if a in ls:
                return b in ls
        raise KeyError(f"unknown label {a}")

    def advance(self, until, rng):
        if until < self.time:
            raise ValueError("cannot advance a system backwards")
        dt = until - self.time
        if dt > 0.0 and self.n_classes > 0:
            mod = _walk_backend(self.kernel, self.n_classes)
            pos, masks, _ = mod.walk_single(
                self._class_pos, self.rate, dt, rng,
                self._cum, self._offs, True)
            new_pos, new_labels = [], []
            for p, mask in zip(pos, masks):
                merged = []
                for ci in range(len(self._class_labels)):
                    if mask & (1 << ci):
                        merged.extend(self._class_labels[ci])
                new_pos.append(tuple(int(c) for c in p))
                new_labels.append(merged)
            self._class_pos, self._class_labels = new_pos, new_labels
        self.time = until
        return self


# -- constant estimators -----------------------------------------------------


def estimate_tau_leq(A, kernel, rate, t, reps, rng):
    """P(tau(A) <= t) for walkers started on the point set A.

    The empty set and singletons coalesce at time zero by convention, so
    they return probability 1 exactly and consume no randomness.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    pts = _points(A, kernel.d)
    if len(pts) <= 1:
        return TauEstimate(estimate=1.0, se=0.0, reps=int(reps),
                           horizon=float(t))
    cum, offs = _kernel_arrays(kernel)
    mod = _walk_backend(kernel, len(pts))
    hits = mod.tau_leq_trials(pts, kernel.d, cum, offs, float(rate),
                              float(t), int(reps), rng)
    return _from_hits(int(hits), int(reps), t)


def default_eps_star(N):
    """Cutoff-time schedule for the rate-N dual constants."""
    return float(N) ** -0.25


def estimate_sigma(A, kernel, N, reps, rng, eps_star=None):
    """sigma_N(A): coalescence of the rate-N system by the cutoff time."""
    eps = default_eps_star(N) if eps_star is None else float(eps_star)
    return estimate_tau_leq(A, kernel, float(N), eps, reps, rng)


def estimate_gamma_e(kernel, horizon, reps, rng, rate=1.0, ladder=True):
    """Escape probability of the two-walk system, kernel-sampled start.

    With ``ladder`` the replicates run once to 4T recording escape at
    T, 2T and 4T on the common path; the tail decays like 1/sqrt(t) for
    a d=3 walk, so one Richardson step over the doubling ladder removes
    the leading bias.  The standard error is exact for the extrapolated
    combination because the ladder indicators are nested.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cum, offs = _kernel_arrays(kernel)
    mod = _walk_backend(kernel, 2)
    T = float(horizon)
    if not ladder:
        counts = mod.escape_ladder_trials(kernel.d, cum, offs, float(rate),
                                          [T], int(reps), rng)
        return _from_hits(int(counts[0]), int(reps), T)
    counts = mod.escape_ladder_trials(kernel.d, cum, offs, float(rate),
                                      [T, 2.0 * T, 4.0 * T], int(reps), rng)
    p1, p2, p4 = (int(c) / reps for c in counts)
    # P(tau > t) ~ limit + c/sqrt(t):  one elimination step
    raw = p4 - (p2 - p4) / (SQRT2 - 1.0)
    est = min(max(raw, 0.0), p4)
    a = SQRT2 / (SQRT2 - 1.0)
    b = 1.0 / (SQRT2 - 1.0)
    # the combination a*I4 - b*I2 has three atoms: 1, -b, 0
    second = 1.0 * p4 + b * b * (p2 - p4)
    var = max(second - raw * raw, 0.0)
    return TauEstimate(estimate=est, se=math.sqrt(var / reps),
                       reps=int(reps), horizon=4.0 * T, bracket=(p4, p1))


def estimate_beta_delta_coal(kernel, horizon, reps, rng, rate=1.0,
                             e1=None, e2=None):
    """(beta_hat, delta_hat) from shared three-walk replicates.

    delta: the origin walker's class meets nobody by the horizon.
    beta: additionally the two kernel-offset walkers coalesced.  Both
    indicators come off one path, so beta_hat <= delta_hat always.
    ``e1``/``e2`` pin the offsets (tests); by default both are kernel
    samples drawn per replicate.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cum, offs = _kernel_arrays(kernel)
    mod = _walk_backend(kernel, 3)
    b_hits, d_hits = mod.beta_delta_trials(
        kernel.d, cum, offs, float(rate), float(horizon), int(reps), rng,
        e1, e2)
    return (_from_hits(int(b_hits), int(reps), horizon),
            _from_hits(int(d_hits), int(reps), horizon))


def estimate_gamma_N(kernel, N, reps, rng, eps_star=None):
    """gamma_N: the rate-N pair has not coalesced by the cutoff time."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    eps = default_eps_star(N) if eps_star is None else float(eps_star)
    cum, offs = _kernel_arrays(kernel)
    mod = _walk_backend(kernel, 2)
    counts = mod.escape_ladder_trials(kernel.d, cum, offs, float(N),
                                      [eps], int(reps), rng)
    return _from_hits(int(counts[0]), int(reps), eps)


# -- drift assembly ----------------------------------------------------------


def long_range_sigma():
    """Analytic sigma of the wide-kernel limit: 1 on small sets, else 0."""
    def sigma(points):
        return TauEstimate(estimate=1.0 if len(points) <= 1 else 0.0,
                           se=0.0, reps=0, horizon=0.0)
    return sigma


def _sigma_lookup(sigma, points):
    if len(points) <= 1:
        return 1.0, 0.0
    if callable(sigma):
        got = sigma(points)
    else:
        got = sigma.get(point_key(points))
    if got is None:
        return None
    if isinstance(got, TauEstimate):
        return float(got.estimate), float(got.se)
    return float(got), 0.0


@dataclass(frozen=True)
class ThetaEstimate:
    value: float
    se: float
    terms: tuple


def assemble_theta(beta, delta, sigma):
    """Drift from perturbation weights and coalescence probabilities.

    ``beta``/``delta`` map canonical offset keys (tuples of nonzero
    offsets, possibly the empty key) to weights.  ``sigma`` is either a
    callable on point sets or a mapping keyed by :func:`point_key`;
    values are TauEstimate or bare floats.  theta sums, over every key
    with any weight, beta(A)*sigma(A) - (beta(A)+delta(A))*sigma(A+{0}).
    Errors from independent sigma estimates propagate linearly.
    """
    keys = sorted(set(beta) | set(delta))
    gaps = []
    total = 0.0
    var = 0.0
    terms = []
    for key in keys:
        b = float(beta.get(key, 0.0))
        dl = float(delta.get(key, 0.0))
        if b == 0.0 and dl == 0.0:
            continue
        pts = [tuple(a) for a in key]
        if not pts:
            # sigma(empty) = sigma(singleton) = 1 exactly
            contrib = b - (b + dl)
            total += contrib
            terms.append((key, contrib))
            continue
        origin = (0,) * len(pts[0])
        s_a = _sigma_lookup(sigma, pts)
        s_a0 = _sigma_lookup(sigma, pts + [origin])
        if s_a is None:
            gaps.append(point_key(pts))
        if s_a0 is None:
            gaps.append(point_key(pts + [origin]))
        if s_a is None or s_a0 is None:
            continue
        contrib = b * s_a[0] - (b + dl) * s_a0[0]
        total += contrib
        var += (b * s_a[1]) ** 2 + ((b + dl) * s_a0[1]) ** 2
        terms.append((key, contrib))
    if gaps:
        listing = ", ".join(repr(g) for g in sorted(set(gaps)))
        raise ValueError(f"sigma estimates missing for: {listing}")
    return ThetaEstimate(value=total, se=math.sqrt(var), terms=tuple(terms))


def theta_from_table(table: PerturbationTable, sigma):
    """assemble_theta with weights read off a perturbation table."""
    beta = {k: table.beta(k) for k in table.keys()}
    delta = {k: table.delta(k) for k in table.keys()}
    return assemble_theta(beta, delta, sigma)


def sigma_for_table(table: PerturbationTable, kernel, N, reps, rng,
                    eps_star=None):
    """Every sigma estimate :func:`theta_from_table` will ask for.

    Returns a dict keyed by :func:`point_key` covering each table key A
    (when |A| >= 2) and its A + {0} companion.
    """
    out = {}
    origin = (0,) * kernel.d
    for key in table.keys():
        pts = [tuple(a) for a in key]
        for pset in (pts, pts + [origin]):
            if len(pset) <= 1:
                continue
            pk = point_key(pset)
            if pk not in out:
                out[pk] = estimate_sigma(pset, kernel, N, reps, rng,
                                         eps_star=eps_star)
    return out


# -- duality cross-check -----------------------------------------------------


@dataclass(frozen=True)
class DualityReport:
    """Both sides of the voter-dual identity plus the comparison test."""

    lhs: TauEstimate
    rhs: TauEstimate
    z: float
    p_value: float

    def passed(self, alpha=0.01):
        return self.p_value >= alpha


def duality_check(kernel, N, xi0, A, x, t, reps, rng):
    """Voter expectation of the A-indicator at x vs the dual walks.

    Left side: fraction of voter runs from ``xi0`` in which every x + a
    is occupied at time t.  Right side: fraction of coalescing-walk runs
    started at {x + a} whose surviving classes all land in ``xi0`` at
    time t.  The two are equal in law, which the z-test certifies.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    x = tuple(int(c) for c in x)
    key = tuple(tuple(int(c) for c in a) for a in A)
    sites = sorted(set(tuple(int(c) for c in s) for s in xi0))
    l_hits = 0
    for _ in range(reps):
        res = simulate(kernel, "voter", sites, t, N=N, rng=rng)
        occ = set(map(tuple, res.final_sites))
        l_hits += chi(key, x, occ)
    starts = [tuple(c + a for c, a in zip(x, off)) for off in key]
    if starts:
        cum, offs = _kernel_arrays(kernel)
        mod = _walk_backend(kernel, len(set(starts)))
        r_hits = int(mod.duality_trials(sorted(set(starts)), kernel.d, cum,
                                        offs, float(N), float(t), int(reps),
                                        rng, sites))
    else:
        r_hits = reps
    z, p = two_proportion_z(l_hits, reps, r_hits, reps)
    return DualityReport(lhs=_from_hits(l_hits, reps, t),
                         rhs=_from_hits(r_hits, reps, t), z=z, p_value=p)
