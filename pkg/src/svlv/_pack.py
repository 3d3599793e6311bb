"""Prepared model data shared by the simulation backends.

A :class:`ModelPack` freezes everything an engine needs into flat arrays:
kernel offsets with aligned probabilities and cumulative weights, the
activation-offset list (origin, kernel supports, and every table key
offset, lex sorted) with per-offset kernel weights, flattened interaction
table entries, and the optional domain box.  The compiled backend reads
the arrays directly; the pure-Python twin converts them to tuples once at
engine construction.
"""

from dataclasses import dataclass, field
from math import fsum

import numpy as np

from ._errors import PositivityError
from .kernels import KernelSpec
from .perturbation import EMPTY, PerturbationTable

KIND_VOTER = 0
KIND_LV = 1
KIND_BIASED = 2
KIND_TABLE = 3

_KIND_NAMES = {KIND_VOTER: "voter", KIND_LV: "lotka_volterra",
               KIND_BIASED: "biased_voter", KIND_TABLE: "table"}


@dataclass
class ModelPack:
    d: int
    kind: int
    N: float
    theta0: float = 0.0
    theta1: float = 0.0
    bias: float = 0.0
    k_delta: float = 0.0
    c_bar: float = 0.0
    delta_empty: float = 0.0
    neg_tol: float = 1e-9
    k_offsets: np.ndarray = None
    k_probs: np.ndarray = None
    k_cum: np.ndarray = None
    k2_offsets: np.ndarray = None
    k2_probs: np.ndarray = None
    k2_cum: np.ndarray = None
    act_offs: np.ndarray = None
    act_p: np.ndarray = None
    act_p2: np.ndarray = None
    table_entries: list = field(default_factory=list)
    ent_len: np.ndarray = None
    ent_offs: np.ndarray = None
    ent_beta: np.ndarray = None
    ent_delta: np.ndarray = None
    has_domain: bool = False
    dom_lo: np.ndarray = None
    dom_hi: np.ndarray = None

    @property
    def kind_name(self):
        return _KIND_NAMES[self.kind]


def _kernel_arrays(kernel):
    offs = kernel.offsets_array()
    probs = np.asarray(kernel.probs, dtype=float).copy()
    cum = kernel.cumsum().copy()
    return offs, probs, cum


def _empty_kernel_arrays(d):
    return (np.zeros((0, d), dtype=np.int64), np.zeros(0, dtype=float),
            np.zeros(0, dtype=float))


def _weighted_cum(pairs, d):
    """(offsets, probs, cum) from {offset: weight}, lex order, cum[-1]=1."""
    items = sorted(pairs.items())
    offs = np.array([o for o, _ in items], dtype=np.int64).reshape(len(items), d)
    probs = np.array([w for _, w in items], dtype=float)
    total = fsum(probs.tolist())
    probs = probs / total
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    return offs, probs, cum


def _activation(d, kernel_offs, extra_offs_lists):
    """Lex-sorted union of origin, kernel support(s) and key offsets."""
    seen = {(0,) * d}
    for row in kernel_offs:
        seen.add(tuple(int(c) for c in row))
    for offs in extra_offs_lists:
        for row in offs:
            seen.add(tuple(int(c) for c in row))
    act = sorted(seen)
    return np.array(act, dtype=np.int64).reshape(len(act), d)


def _weights_on(act_offs, offs, probs):
    lut = {tuple(int(c) for c in row): float(p) for row, p in zip(offs, probs)}
    return np.array([lut.get(tuple(int(c) for c in row), 0.0)
                     for row in act_offs], dtype=float)


def _domain_arrays(d, domain):
    if domain is None:
        return False, np.zeros(d, dtype=np.int64), np.zeros(d, dtype=np.int64)
    lo, hi = domain
    lo = np.asarray(lo, dtype=np.int64).reshape(d)
    hi = np.asarray(hi, dtype=np.int64).reshape(d)
    if np.any(lo > hi):
        raise ValueError("domain box has empty extent")
    return True, lo, hi


def _default_neg_tol(N, theta0, theta1):
    return 1e-9 * (abs(N) + abs(theta0) + abs(theta1) + 1.0)


def pack_voter(kernel: KernelSpec, N: float, domain=None) -> ModelPack:
    offs, probs, cum = _kernel_arrays(kernel)
    act = _activation(kernel.d, offs, [])
    has_dom, lo, hi = _domain_arrays(kernel.d, domain)
    return ModelPack(
        d=kernel.d, kind=KIND_VOTER, N=float(N),
        neg_tol=_default_neg_tol(N, 0.0, 0.0),
        k_offsets=offs, k_probs=probs, k_cum=cum,
        k2_offsets=_empty_kernel_arrays(kernel.d)[0],
        k2_probs=_empty_kernel_arrays(kernel.d)[1],
        k2_cum=_empty_kernel_arrays(kernel.d)[2],
        act_offs=act, act_p=_weights_on(act, offs, probs),
        act_p2=np.zeros(len(act), dtype=float),
        has_domain=has_dom, dom_lo=lo, dom_hi=hi,
    )


def pack_lv(kernel: KernelSpec, N: float, theta0: float, theta1: float,
            domain=None) -> ModelPack:
    """Competition model: births f1*(N+theta0*f1), deaths f0*(N+theta1*f0)."""
    if N + theta0 < 0.0 or N + theta1 < 0.0:
        raise PositivityError(
            "competition strengths must satisfy N+theta0 >= 0 and N+theta1 >= 0"
        )
    offs, probs, cum = _kernel_arrays(kernel)
    act = _activation(kernel.d, offs, [])
    has_dom, lo, hi = _domain_arrays(kernel.d, domain)
    return ModelPack(
        d=kernel.d, kind=KIND_LV, N=float(N),
        theta0=float(theta0), theta1=float(theta1),
        k_delta=abs(float(theta1)),
        c_bar=abs(float(theta1)) + max(float(theta0), 0.0),
        neg_tol=_default_neg_tol(N, theta0, theta1),
        k_offsets=offs, k_probs=probs, k_cum=cum,
        k2_offsets=offs.copy(), k2_probs=probs.copy(), k2_cum=cum.copy(),
        act_offs=act, act_p=_weights_on(act, offs, probs),
        act_p2=_weights_on(act, offs, probs),
        has_domain=has_dom, dom_lo=lo, dom_hi=hi,
    )


def pack_biased(kernel: KernelSpec, v: float, bias: float,
                bias_offsets, bias_probs, domain=None) -> ModelPack:
    """Biased voter: births v*f1 + bias*fb1, deaths v*f0."""
    offs, probs, cum = _kernel_arrays(kernel)
    d = kernel.d
    pairs = {tuple(int(c) for c in row): float(p)
             for row, p in zip(np.asarray(bias_offsets, dtype=np.int64).reshape(-1, d),
                               bias_probs)}
    b_offs, b_probs, b_cum = _weighted_cum(pairs, d)
    act = _activation(d, offs, [b_offs])
    has_dom, lo, hi = _domain_arrays(d, domain)
    if v < 0.0 or bias < 0.0:
        raise PositivityError("biased voter needs v >= 0 and bias >= 0")
    return ModelPack(
        d=d, kind=KIND_BIASED, N=float(v), bias=float(bias),
        neg_tol=_default_neg_tol(v, bias, 0.0),
        k_offsets=offs, k_probs=probs, k_cum=cum,
        k2_offsets=b_offs, k2_probs=b_probs, k2_cum=b_cum,
        act_offs=act, act_p=_weights_on(act, offs, probs),
        act_p2=_weights_on(act, b_offs, b_probs),
        has_domain=has_dom, dom_lo=lo, dom_hi=hi,
    )


def _table_flats(table: PerturbationTable):
    entries = []
    for key, (beta, delta) in table.entries.items():
        if key == EMPTY:
            continue
        entries.append((key, float(beta), float(delta)))
    lens = np.array([len(k) for k, _, _ in entries], dtype=np.int64)
    if entries:
        flat = np.array([off for k, _, _ in entries for off in k],
                        dtype=np.int64)
    else:
        flat = np.zeros((0, table.d), dtype=np.int64)
    betas = np.array([b for _, b, _ in entries], dtype=float)
    deltas = np.array([dl for _, _, dl in entries], dtype=float)
    return entries, lens, flat.reshape(-1, table.d), betas, deltas


def birth_proposal_kernel(table: PerturbationTable):
    """Offset law of the extra birth proposals: sum of beta+(A)/|A| over A owning a.

    Returns (offsets, weights, total) with weights normalized by the total
    positive birth weight; total == 0 means no positive birth entries.
    """
    acc = {}
    total = 0.0
    for key, (beta, _) in table.entries.items():
        if key == EMPTY or beta <= 0.0:
            continue
        total += beta
        share = beta / len(key)
        for off in key:
            acc[off] = acc.get(off, 0.0) + share
    if total == 0.0:
        return [], [], 0.0
    items = sorted(acc.items())
    return [o for o, _ in items], [w / total for _, w in items], total


def mixed_step_kernel(kernel: KernelSpec, table: PerturbationTable,
                      k_delta: float):
    """Offset law mixing the walk kernel with the birth-proposal kernel.

    Weight proportions: k_delta on the walk kernel, total positive birth
    weight on the proposal kernel.  This is the step law of the dominating
    biased voter chain's extra-birth channel.
    """
    d = kernel.d
    p_offs, p_probs, _ = _kernel_arrays(kernel)
    b_offs, b_probs, c_beta = birth_proposal_kernel(table)
    c_bar = k_delta + c_beta
    pairs = {}
    if c_bar == 0.0:
        # degenerate: no perturbation at all, fall back to the walk kernel
        for row, p in zip(p_offs, p_probs):
            pairs[tuple(int(c) for c in row)] = float(p)
        return _weighted_cum(pairs, d) + (0.0,)
    for row, p in zip(p_offs, p_probs):
        pairs[tuple(int(c) for c in row)] = k_delta * float(p) / c_bar
    for off, w in zip(b_offs, b_probs):
        pairs[off] = pairs.get(off, 0.0) + c_beta * w / c_bar
    offs, probs, cum = _weighted_cum(pairs, d)
    return offs, probs, cum, c_bar


def pack_table(kernel: KernelSpec, N: float, table: PerturbationTable,
               k_delta=None, domain=None) -> ModelPack:
    """General interaction table run on the direct engine."""
    if table.d != kernel.d:
        raise ValueError("table and kernel dimensions differ")
    offs, probs, cum = _kernel_arrays(kernel)
    entries, lens, flat, betas, deltas = _table_flats(table)
    key_offs = flat if len(flat) else np.zeros((0, kernel.d), dtype=np.int64)
    act = _activation(kernel.d, offs, [key_offs])
    has_dom, lo, hi = _domain_arrays(kernel.d, domain)
    c_beta, c_delta, delta_neg, weighted = table.sums()
    kd = float(k_delta) if k_delta is not None else float(c_delta + delta_neg)
    return ModelPack(
        d=kernel.d, kind=KIND_TABLE, N=float(N),
        k_delta=kd, c_bar=kd + c_beta,
        delta_empty=float(table.delta(EMPTY)),
        neg_tol=_default_neg_tol(N, weighted, 0.0),
        k_offsets=offs, k_probs=probs, k_cum=cum,
        k2_offsets=_empty_kernel_arrays(kernel.d)[0],
        k2_probs=_empty_kernel_arrays(kernel.d)[1],
        k2_cum=_empty_kernel_arrays(kernel.d)[2],
        act_offs=act, act_p=_weights_on(act, offs, probs),
        act_p2=np.zeros(len(act), dtype=float),
        table_entries=entries, ent_len=lens, ent_offs=flat,
        ent_beta=betas, ent_delta=deltas,
        has_domain=has_dom, dom_lo=lo, dom_hi=hi,
    )


def pack_coupled(kernel: KernelSpec, N: float, table: PerturbationTable,
                 k_delta=None) -> ModelPack:
    """Pack for the three-process coupling run.

    The perturbed chain runs at full speed; the embedded plain voter runs
    at speed N - k_delta; the dominating chain adds births at rate c_bar
    through the mixed step kernel.  For a competition table the closed
    forms k_delta = |theta1| and c_beta = max(theta0, 0) apply and the
    mixed kernel collapses to the walk kernel.
    """
    lv = table.lv
    if lv is not None:
        theta0, theta1 = lv.theta0, lv.theta1
        base = pack_lv(kernel, N, theta0, theta1)
        kd = abs(theta1)
        if N <= kd:
            raise PositivityError("voter speed must exceed |theta1| for the coupling")
        return base
    base = pack_table(kernel, N, table, k_delta=k_delta)
    if N <= base.k_delta:
        raise PositivityError("voter speed must exceed k_delta for the coupling")
    offs2, probs2, cum2, c_bar = mixed_step_kernel(kernel, table, base.k_delta)
    base.c_bar = c_bar if c_bar > 0.0 else base.c_bar
    base.k2_offsets = offs2
    base.k2_probs = probs2
    base.k2_cum = cum2
    base.act_offs = _activation(kernel.d, base.k_offsets,
                                [offs2, base.ent_offs])
    base.act_p = _weights_on(base.act_offs, base.k_offsets, base.k_probs)
    base.act_p2 = _weights_on(base.act_offs, offs2, probs2)
    return base
