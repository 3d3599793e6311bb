"""Perturbation tables: canonical form, closed-form rates, validation."""

import numpy as np
import pytest

from svlv.kernels import build_long_range_kernel, nearest_neighbor_kernel
from svlv.perturbation import (PerturbationError, PerturbationTable,
                               attach_kernel, canonical_key, chi, empty_table,
                               flip_rate, lv_limit_table, lv_table,
                               lv_two_kernel_table, perturbation_rates,
                               table_from_json, table_to_json, validate_table)


def brute_rate(kernel, table, N, occupied, x):
    """Rate at x from the definition: voter part plus a full table scan."""
    f1 = sum(p for off, p in zip(kernel.offsets, kernel.probs)
             if tuple(a + b for a, b in zip(x, off)) in occupied)
    here = x in occupied
    voter = N * (1.0 - f1 if here else f1)
    extra = 0.0
    for key, (beta, delta) in table.entries.items():
        if chi(key, x, occupied):
            extra += delta if here else beta
    return voter + extra


def test_lv_table_d1_entries():
    t = lv_table(nearest_neighbor_kernel(1), 2.0, 3.0)
    assert t.entries == {
        (): (0.0, 3.0),
        ((-1,),): (0.5, -2.25),
        ((1,),): (0.5, -2.25),
        ((-1,), (1,)): (1.0, 1.5),
    }
    assert t.lv.theta0 == 2.0 and t.lv.theta1 == 3.0


def test_lv_closed_form_equals_table_scan():
    rng = np.random.default_rng(3)
    for d, theta0, theta1 in [(1, 2.0, 3.0), (2, 3.0, -2.0), (3, 0.0, 5.0)]:
        k = nearest_neighbor_kernel(d)
        t = attach_kernel(lv_table(k, theta0, theta1), k)
        occupied = {tuple(rng.integers(-2, 3, size=d)) for _ in range(12)}
        for _ in range(40):
            x = tuple(rng.integers(-2, 3, size=d))
            got = flip_rate(k, t, 100, occupied, x)
            want = brute_rate(k, t, 100, occupied, x)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-9)
            # closed product form
            f1 = sum(p for off, p in zip(k.offsets, k.probs)
                     if tuple(a + b for a, b in zip(x, off)) in occupied)
            if x in occupied:
                assert got == pytest.approx((1 - f1) * (100 + theta1 * (1 - f1)))
            else:
                assert got == pytest.approx(f1 * (100 + theta0 * f1))


def test_generic_table_scan():
    k = nearest_neighbor_kernel(2)
    t = PerturbationTable(2, {
        (): (0.0, 1.5),
        (((1, 0)),): (2.0, 0.5),
        ((0, 1), (1, 0)): (0.25, -0.75),
    })
    occupied = {(0, 0), (1, 0), (0, 1)}
    for x in [(0, 0), (1, 0), (1, 1), (2, 2), (-1, 0)]:
        got = flip_rate(k, t, 50, occupied, x)
        assert got == pytest.approx(brute_rate(k, t, 50, occupied, x))


def test_canonical_key_sorts_and_rejects_repeats():
    assert canonical_key(((1,), (-1,))) == ((-1,), (1,))
    with pytest.raises(PerturbationError):
        canonical_key(((1,), (1,)))


def test_origin_folding():
    # births through the origin can never fire; deaths see it always on
    t = PerturbationTable(1, {((0,), (1,)): (5.0, 7.0)})
    assert t.entries == {((1,),): (0.0, 7.0)}
    t = PerturbationTable(1, {((0,),): (5.0, 7.0)})
    assert t.entries == {(): (0.0, 7.0)}


def test_constructor_rejections():
    with pytest.raises(PerturbationError):
        PerturbationTable(1, {((1, 0),): (1.0, 0.0)})   # wrong dimension
    with pytest.raises(PerturbationError):
        PerturbationTable(1, {(): (1.0, 0.0)})          # beta on empty key


def test_duplicate_keys_merge():
    t = PerturbationTable(1, {((1,), (-1,)): (1.0, 0.5),
                              ((-1,), (1,)): (2.0, 0.25)})
    assert t.entries == {((-1,), (1,)): (3.0, 0.75)}


def test_chi_indicator():
    occupied = {(1,), (2,)}
    assert chi(((1,),), (0,), occupied) == 1
    assert chi(((1,), (2,)), (0,), occupied) == 1
    assert chi(((1,), (3,)), (0,), occupied) == 0
    assert chi((), (0,), occupied) == 1


def test_lv_limit_table():
    # only delta(EMPTY) survives the widening-kernel limit
    t = lv_limit_table(3, 4.0, -2.0)
    assert t.entries == {(): (0.0, -2.0)}
    assert t.lv.theta0 == 4.0 and t.lv.theta1 == -2.0
    assert lv_limit_table(3, 4.0, 0.0).entries == {}


def test_two_kernel_reduces_to_lv():
    k = nearest_neighbor_kernel(2)
    assert lv_two_kernel_table(k, k, k, 2.0, 3.0) == lv_table(k, 2.0, 3.0)
    kb = build_long_range_kernel(2, 2)
    t = lv_two_kernel_table(k, kb, k, 2.0, 3.0)
    assert t != lv_table(k, 2.0, 3.0)
    assert max(len(key) for key in t.keys()) == 2


def test_validate_table_lv_analytic():
    k = nearest_neighbor_kernel(1)
    rep = validate_table(lv_table(k, 2.0, 3.0), k, 100)
    assert rep.n_entries == 4
    assert rep.k_delta == pytest.approx(3.0)     # worst-case death slowdown
    assert rep.c_bar == pytest.approx(rep.k_delta + rep.c_beta)
    assert rep.rate_positive and rep.domination_ok
    assert rep.method == "analytic" and rep.witness is None
    # N too small for theta1 < -N: death rate dips below zero at f0 = 1
    bad = validate_table(lv_table(k, 2.0, -5.0), k, 2)
    assert not bad.rate_positive
    assert bad.min_death_rate == pytest.approx(-3.0)


def test_validate_table_general():
    # same entries as lv_table(k, 2, 3) but without the generator tag,
    # so validation runs the exhaustive dependence-neighborhood scan
    k = nearest_neighbor_kernel(1)
    t = PerturbationTable(1, dict(lv_table(k, 2.0, -3.0).entries))
    with pytest.raises(PerturbationError):
        validate_table(t, k, 100)         # certificate required
    rep = validate_table(t, k, 100, k_delta=3.0)
    assert rep.method == "exhaustive"
    assert rep.rate_positive and rep.domination_ok
    # claimed bound too small: delta undershoots -k_delta * f0 somewhere
    weak = validate_table(t, k, 100, k_delta=1.0)
    assert not weak.domination_ok
    assert weak.witness is not None
    # N = 2 cannot absorb delta(EMPTY) = -5 at full occupancy
    t5 = PerturbationTable(1, dict(lv_table(k, 2.0, -5.0).entries))
    low = validate_table(t5, k, 2, k_delta=5.0)
    assert not low.rate_positive
    assert low.min_death_rate == pytest.approx(-3.0)
    assert low.witness is not None


def test_empty_table():
    t = empty_table(2)
    k = nearest_neighbor_kernel(2)
    occupied = {(0, 0)}
    assert flip_rate(k, t, 10, occupied, (1, 0)) == pytest.approx(2.5)
    assert flip_rate(k, t, 10, occupied, (0, 0)) == pytest.approx(10.0)


def test_json_round_trip():
    # entries survive the trip; generator metadata is deliberately dropped
    k = nearest_neighbor_kernel(2)
    for t in (lv_table(k, 2.0, -1.0),
              PerturbationTable(2, {((1, 0),): (0.5, 0.25)}),
              empty_table(2)):
        t2 = table_from_json(table_to_json(t), 2)
        assert t2 == t
        assert t2.lv is None


def test_perturbation_rates_split():
    k = nearest_neighbor_kernel(1)
    t = attach_kernel(lv_table(k, 2.0, 3.0), k)
    occupied = {(1,)}
    birth, death = perturbation_rates(t, (0,), occupied)
    assert birth == pytest.approx(0.5)      # theta0 * f1^2 = 2 * 0.25
    assert death == pytest.approx(0.75)     # theta1 * f0^2 = 3 * 0.25
