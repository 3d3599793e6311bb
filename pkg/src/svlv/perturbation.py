"""Finite perturbation tables layered on top of the voter flip rates.

A table assigns to each finite set A of nonzero lattice offsets a birth
weight ``beta(A)`` (active when the flipping site is vacant) and a death
weight ``delta(A)`` (active when it is occupied); the indicator
``chi(A, x, xi)`` requires every site x + a, a in A, to be occupied.
The total flip rate at x is

    N * sum_e p(e) 1{xi(x+e) != xi(x)}
      + sum_A chi(A, x, xi) * (beta(A) 1{xi(x)=0} + delta(A) 1{xi(x)=1}).

Keys never contain the origin: birth weights on such sets can never fire
(they would need the vacant site itself occupied) and are dropped on
load, while death weights are folded into the key with the origin
removed, which leaves every reachable rate unchanged.

Lotka-Volterra competition tables are generated from a step kernel and
finite-N coefficients (theta0, theta1); they carry metadata letting the
engines use the closed product form of their rates instead of scanning
the (possibly large) pair table.
"""

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .kernels import local_density

EMPTY = ()


class PerturbationError(ValueError):
    pass


def canonical_key(offsets):
    key = tuple(sorted(tuple(int(c) for c in off) for off in offsets))
    if len(set(key)) != len(key):
        raise PerturbationError(f"repeated offset in key {key}")
    return key


def kernel_fingerprint(kernel):
    h = hashlib.sha256()
    h.update(repr(kernel.offsets).encode())
    h.update(kernel.probs.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class LVParams:
    """Marks a table as generated by ``lv_table(kernel, theta0, theta1)``."""

    theta0: float
    theta1: float
    kernel_fp: str


class PerturbationTable:
    """Immutable canonical map key -> (beta, delta).

    Entries are held in a dict keyed by canonical sorted offset tuples,
    in deterministic (size, lex) order.  ``beta(EMPTY)`` is structurally
    zero.  ``lv`` is an LVParams instance for generated competition
    tables, else None.
    """

    def __init__(self, d, entries, lv=None):
        self.d = int(d)
        folded = {}
        origin = (0,) * self.d
        for key, (beta, delta) in entries.items():
            key = canonical_key(key)
            for off in key:
                if len(off) != self.d:
                    raise PerturbationError(f"offset {off} has wrong dimension")
            beta = float(beta)
            delta = float(delta)
            if origin in key:
                # The origin factor is xi(x) itself: births can never fire,
                # deaths see it always on, so fold onto the reduced key.
                key = tuple(off for off in key if off != origin)
                beta = 0.0
            prev = folded.get(key)
            if prev is not None:
                beta, delta = prev[0] + beta, prev[1] + delta
            folded[key] = (beta, delta)
        if folded.get(EMPTY, (0.0, 0.0))[0] != 0.0:
            raise PerturbationError("beta on the empty key must be zero")
        items = sorted(folded.items(), key=lambda kv: (len(kv[0]), kv[0]))
        self.entries = {k: v for k, v in items if v != (0.0, 0.0) or k == EMPTY}
        self.lv = lv

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, PerturbationTable) and self.d == other.d \
            and self.entries == other.entries

    def keys(self):
        return self.entries.keys()

    def beta(self, key):
        return self.entries.get(canonical_key(key), (0.0, 0.0))[0]

    def delta(self, key):
        return self.entries.get(canonical_key(key), (0.0, 0.0))[1]

    def key_offsets(self):
        """Sorted set of all offsets appearing in any key."""
        out = set()
        for key in self.entries:
            out.update(key)
        return sorted(out)

    def sums(self):
        """(c_beta, c_delta, delta_neg, weighted) over all entries."""
        c_beta = math.fsum(max(b, 0.0) for b, _ in self.entries.values())
        c_delta = math.fsum(max(dl, 0.0) for _, dl in self.entries.values())
        delta_neg = math.fsum(max(-dl, 0.0) for _, dl in self.entries.values())
        weighted = math.fsum(
            max(len(k), 1) * (abs(b) + abs(dl)) for k, (b, dl) in self.entries.items()
        )
        return c_beta, c_delta, delta_neg, weighted

    def flat_arrays(self):
        """Flattened (lengths, offsets, beta, delta) arrays for the engines."""
        lengths, flat, betas, deltas = [], [], [], []
        for key, (b, dl) in self.entries.items():
            lengths.append(len(key))
            for off in key:
                flat.append(off)
            betas.append(b)
            deltas.append(dl)
        offs = np.array(flat, dtype=np.int64).reshape(len(flat), self.d) if flat \
            else np.zeros((0, self.d), dtype=np.int64)
        return (
            np.array(lengths, dtype=np.int64),
            offs,
            np.array(betas, dtype=float),
            np.array(deltas, dtype=float),
        )


def empty_table(d):
    return PerturbationTable(d, {})


def lv_table(kernel, theta0, theta1):
    """Competition table: births theta0*f1^2 on vacants, deaths theta1*f0^2.

    Singleton weights beta({a}) = theta0*p(a)^2 and
    delta({a}) = theta1*(p(a)^2 - 2 p(a)); unordered pairs get
    2*theta*p(a)*p(a'); delta(EMPTY) = theta1.
    """
    entries = {}
    offs = kernel.offsets
    p = kernel.probs
    if theta1 != 0.0:
        entries[EMPTY] = (0.0, float(theta1))
    for i, a in enumerate(offs):
        b = theta0 * float(p[i]) ** 2
        dl = theta1 * (float(p[i]) ** 2 - 2.0 * float(p[i]))
        if b != 0.0 or dl != 0.0:
            entries[(a,)] = (b, dl)
        for j in range(i + 1, len(offs)):
            b2 = 2.0 * theta0 * float(p[i]) * float(p[j])
            dl2 = 2.0 * theta1 * float(p[i]) * float(p[j])
            if b2 != 0.0 or dl2 != 0.0:
                entries[canonical_key((a, offs[j]))] = (b2, dl2)
    lv = LVParams(float(theta0), float(theta1), kernel_fingerprint(kernel))
    return PerturbationTable(kernel.d, entries, lv=lv)


def lv_limit_table(d, theta0, theta1):
    """Pointwise limit of competition tables under a widening kernel.

    Every key weight carries kernel probabilities and vanishes as the
    range grows; only delta(EMPTY) = theta1 survives.  The result is an
    assembly-side object (drift bookkeeping), not a simulatable model:
    theta0 leaves no trace in it.
    """
    entries = {EMPTY: (0.0, float(theta1))} if theta1 != 0.0 else {}
    lv = LVParams(float(theta0), float(theta1), kernel_fp=None)
    return PerturbationTable(d, entries, lv=lv)


def lv_two_kernel_table(kernel, birth_kernel, death_kernel, theta0, theta1):
    """Competition with separate interaction kernels for births and deaths.

    Birth perturbation theta0*f1*f1^b, death perturbation theta1*f0*f0^d,
    where the superscripted densities use the extra kernels.
    """
    if birth_kernel.d != kernel.d or death_kernel.d != kernel.d:
        raise PerturbationError("kernel dimensions disagree")
    entries = {}
    if theta1 != 0.0:
        entries[EMPTY] = (0.0, float(theta1))

    def add(key, b, dl):
        if b == 0.0 and dl == 0.0:
            return
        old = entries.get(key, (0.0, 0.0))
        entries[key] = (old[0] + b, old[1] + dl)

    p = {off: float(w) for off, w in zip(kernel.offsets, kernel.probs)}
    pb = {off: float(w) for off, w in zip(birth_kernel.offsets, birth_kernel.probs)}
    pd = {off: float(w) for off, w in zip(death_kernel.offsets, death_kernel.probs)}
    support = sorted(set(p) | set(pb) | set(pd))
    for i, a in enumerate(support):
        add((a,),
            theta0 * p.get(a, 0.0) * pb.get(a, 0.0),
            theta1 * (p.get(a, 0.0) * pd.get(a, 0.0) - p.get(a, 0.0) - pd.get(a, 0.0)))
        for a2 in support[i + 1:]:
            key = canonical_key((a, a2))
            add(key,
                theta0 * (p.get(a, 0.0) * pb.get(a2, 0.0) + p.get(a2, 0.0) * pb.get(a, 0.0)),
                theta1 * (p.get(a, 0.0) * pd.get(a2, 0.0) + p.get(a2, 0.0) * pd.get(a, 0.0)))
    return PerturbationTable(kernel.d, entries)


def chi(key, x, occupied):
    """Product indicator: every x + a with a in the key is occupied."""
    x = tuple(x)
    for a in key:
        if tuple(c + o for c, o in zip(x, a)) not in occupied:
            return 0
    return 1


def perturbation_rates(table, x, occupied):
    """(birth weight if x vacant, death weight if x occupied) at x."""
    if table.lv is not None:
        return _lv_rates_closed_form(table, x, occupied)
    b_tot = 0.0
    d_tot = 0.0
    for key, (b, dl) in table.entries.items():
        if chi(key, x, occupied):
            b_tot += b
            d_tot += dl
    return b_tot, d_tot


def _lv_rates_closed_form(table, x, occupied):
    kernel = getattr(table, "_lv_kernel", None)
    if kernel is None:
        raise PerturbationError("closed-form rates need attach_kernel() first")
    f0, f1 = local_density(kernel, occupied, x)
    return table.lv.theta0 * f1 * f1, table.lv.theta1 * f0 * f0


def attach_kernel(table, kernel):
    """Bind the generating kernel so closed-form fast paths can be used."""
    if table.lv is not None and table.lv.kernel_fp != kernel_fingerprint(kernel):
        raise PerturbationError("table was generated from a different kernel")
    table._lv_kernel = kernel
    return table


def config_fingerprint(occupied):
    h = hashlib.sha256()
    for site in sorted(occupied):
        h.update(repr(site).encode())
    return h.hexdigest()[:12]


def flip_rate(kernel, table, N, occupied, x):
    """Total flip rate at x; aborts if the combined rate is negative."""
    x = tuple(x)
    occ = x in occupied
    f0, f1 = local_density(kernel, occupied, x)
    voter = N * (f0 if occ else f1)
    if table is None:
        pb, pd = 0.0, 0.0
    elif table.lv is not None and getattr(table, "_lv_kernel", None) is kernel:
        pb, pd = table.lv.theta0 * f1 * f1, table.lv.theta1 * f0 * f0
    else:
        pb, pd = perturbation_rates(table, x, occupied)
    rate = voter + (pd if occ else pb)
    if rate < 0.0:
        raise PerturbationError(
            f"negative flip rate {rate!r} at site {x} "
            f"(config {config_fingerprint(occupied)})"
        )
    return rate


@dataclass(frozen=True)
class TableReport:
    """Validation certificate for one table at one level N."""

    n_entries: int
    weighted_sum: float
    delta_neg_sum: float
    c_beta: float
    c_delta: float
    k_delta: float
    c_bar: float
    min_birth_rate: float
    min_death_rate: float
    rate_positive: bool
    domination_ok: bool
    method: str
    witness: tuple = None


def validate_table(table, kernel, N, k_delta=None, samples=100_000, seed=0):
    """Certify positivity and domination bounds for (kernel, table, N).

    For generated competition tables everything is analytic.  Otherwise
    the dependence neighbourhood is enumerated exhaustively when it has
    at most 20 sites and sampled (``samples`` draws) when larger.
    k_delta must be supplied for general tables; competition tables use
    |theta1|.
    """
    c_beta, c_delta, delta_neg, weighted = table.sums()
    if table.lv is not None:
        th0, th1 = table.lv.theta0, table.lv.theta1
        k_delta = abs(th1)
        # min over f in [0,1] of f*(N + theta*f), worst at f=1 for theta<0
        min_birth = min(0.0, N + th0)
        min_death = min(0.0, N + th1)
        ok = min_birth >= 0.0 and min_death >= 0.0
        return TableReport(
            n_entries=len(table), weighted_sum=weighted, delta_neg_sum=delta_neg,
            c_beta=c_beta, c_delta=c_delta, k_delta=k_delta, c_bar=k_delta + c_beta,
            min_birth_rate=min_birth, min_death_rate=min_death,
            rate_positive=ok, domination_ok=True, method="analytic",
        )

    if k_delta is None:
        raise PerturbationError("k_delta certificate required for general tables")
    k_delta = float(k_delta)
    dep = sorted(set(table.key_offsets()) | set(kernel.offsets))
    min_birth = math.inf
    min_death = math.inf
    dom_ok = True
    witness = None
    x = (0,) * table.d

    def check(occupied):
        nonlocal min_birth, min_death, dom_ok, witness
        f0, f1 = local_density(kernel, occupied, x)
        pb, pd = perturbation_rates(table, x, occupied)
        birth = N * f1 + pb
        death = N * f0 + pd
        if birth < min_birth:
            min_birth = birth
            if birth < 0.0:
                witness = tuple(sorted(occupied))
        if death < min_death:
            min_death = death
            if death < 0.0:
                witness = tuple(sorted(occupied))
        if pd < -k_delta * f0 - 1e-12 * (1.0 + k_delta):
            dom_ok = False
            witness = tuple(sorted(occupied))

    if len(dep) <= 20:
        method = "exhaustive"
        for mask in range(1 << len(dep)):
            occupied = {dep[i] for i in range(len(dep)) if mask >> i & 1}
            check(occupied)
    else:
        method = "sampled"
        rng = np.random.Generator(np.random.PCG64(seed))
        for _ in range(samples):
            density = rng.random()
            keep = rng.random(len(dep)) < density
            occupied = {off for off, k in zip(dep, keep) if k}
            check(occupied)

    ok = min_birth >= 0.0 and min_death >= 0.0
    return TableReport(
        n_entries=len(table), weighted_sum=weighted, delta_neg_sum=delta_neg,
        c_beta=c_beta, c_delta=c_delta, k_delta=k_delta, c_bar=k_delta + c_beta,
        min_birth_rate=min_birth, min_death_rate=min_death,
        rate_positive=ok, domination_ok=dom_ok, method=method, witness=witness,
    )


def table_to_json(table):
    rows = []
    for key, (b, dl) in table.entries.items():
        rows.append({"A": [list(off) for off in key], "beta": b, "delta": dl})
    return json.dumps(rows)


def table_from_json(text, d):
    rows = json.loads(text)
    entries = {}
    for row in rows:
        key = canonical_key(tuple(tuple(off) for off in row["A"]))
        b = float(row.get("beta", 0.0))
        dl = float(row.get("delta", 0.0))
        if key in entries:
            b += entries[key][0]
            dl += entries[key][1]
        entries[key] = (b, dl)
    return PerturbationTable(d, entries)
