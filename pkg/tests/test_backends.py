"""Compiled core and pure-Python twin must agree bit for bit.

Both backends consume the identical uniform stream and perform the same
floating-point operations, so every field of every result is compared
with exact equality, never with a tolerance.
"""

import numpy as np
import pytest

import svlv
from svlv import _backend
from svlv.coalescing import (duality_check, estimate_beta_delta_coal,
                             estimate_gamma_N, estimate_gamma_e,
                             estimate_sigma)
from svlv.kernels import (build_fixed_kernel, build_long_range_kernel,
                          nearest_neighbor_kernel)
from svlv.perturbation import PerturbationTable, lv_table
from svlv.simulator import coupled_run, run_biased_voter, simulate

pytestmark = pytest.mark.skipif(not svlv.compiled_available(),
                                reason="compiled core not built")


def run_both(thunk):
    out = []
    for mod in (_backend._core_py, _backend._core):
        saved = _backend._default
        _backend._default = mod
        try:
            out.append(thunk())
        finally:
            _backend._default = saved
    return out


def assert_runs_equal(a, b):
    assert a.events == b.events
    assert a.steps == b.steps
    assert a.absorbed == b.absorbed
    np.testing.assert_array_equal(a.final_sites, b.final_sites)
    np.testing.assert_array_equal(a.mass_grid, b.mass_grid)
    for field in ("int_mass", "int_f0", "int_vf1", "int_d2num",
                  "int_d3num", "int_qv2num"):
        assert getattr(a, field) == getattr(b, field), field
    if a.log_t is not None:
        np.testing.assert_array_equal(a.log_t, b.log_t)
        np.testing.assert_array_equal(a.log_site, b.log_site)
        np.testing.assert_array_equal(a.log_val, b.log_val)


BOX3 = [(x, y, z) for x in range(3) for y in range(3) for z in range(3)]


def test_voter_direct_identical():
    k = nearest_neighbor_kernel(3)
    a, b = run_both(lambda: simulate(
        k, "voter", BOX3, 0.4, N=60, rng=np.random.default_rng(101),
        grid=(0.0, 0.2, 0.4), track_qv=True, record_log=True))
    assert {a.backend, b.backend} == {"python", "c"}
    assert_runs_equal(a, b)


def test_lv_direct_identical():
    k = nearest_neighbor_kernel(3)
    a, b = run_both(lambda: simulate(
        k, ("lv", 3.0, -2.0), BOX3, 0.4, N=60,
        rng=np.random.default_rng(102), grid=(0.1, 0.3), track_qv=True,
        record_log=True))
    assert_runs_equal(a, b)


def test_table_direct_identical():
    k = nearest_neighbor_kernel(2)
    table = PerturbationTable(2, {
        ((1, 0),): (0.7, 0.2),
        ((0, 1), (1, 0)): (0.0, 1.1),
        (): (0.0, 0.4),
    })
    init = [(x, y) for x in range(3) for y in range(3)]
    a, b = run_both(lambda: simulate(
        k, table, init, 0.5, N=40, rng=np.random.default_rng(103),
        track_qv=True, record_log=True))
    assert_runs_equal(a, b)


def test_lv_thinning_identical():
    k = nearest_neighbor_kernel(3)
    a, b = run_both(lambda: simulate(
        k, ("lv", 2.0, 1.0), BOX3, 0.3, N=80,
        rng=np.random.default_rng(104), engine="thinning", track_qv=True,
        record_log=True))
    assert_runs_equal(a, b)


def test_long_range_voter_identical():
    k = build_long_range_kernel(2, 6)     # auto-routes to thinning
    init = [(x, y) for x in range(4) for y in range(4)]
    a, b = run_both(lambda: simulate(
        k, "voter", init, 0.2, N=50, rng=np.random.default_rng(105),
        record_log=True))
    assert_runs_equal(a, b)


def test_biased_voter_identical():
    k = nearest_neighbor_kernel(3)
    bias = {(1, 0, 0): 1 / 3, (0, 1, 0): 1 / 3, (0, 0, 1): 1 / 3}
    a, b = run_both(lambda: run_biased_voter(
        k, bias, BOX3, 0.3, v=50.0, b=4.0, rng=np.random.default_rng(106),
        grid=(0.3,), record_log=True))
    assert_runs_equal(a, b)


def test_coupled_run_identical():
    k = nearest_neighbor_kernel(3)
    table = lv_table(k, 5.0, 5.0)
    a, b = run_both(lambda: coupled_run(
        k, table, BOX3, 0.25, N=60, rng=np.random.default_rng(107),
        grid=(0.1, 0.25)))
    assert a.events == b.events
    assert a.dom_checks == b.dom_checks
    for field in ("final_sites", "final_sites_hat", "final_sites_bar",
                  "mass_grid", "mass_grid_hat", "mass_grid_bar"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    for field in ("int_mass", "int_mass_hat", "int_mass_bar"):
        assert getattr(a, field) == getattr(b, field), field


def test_lex_selection_identical():
    k = build_fixed_kernel(2, [((1, 0), 0.25), ((-1, 0), 0.25),
                               ((0, 1), 0.25), ((0, -1), 0.25)])
    init = [(x, y) for x in range(3) for y in range(3)]
    a, b = run_both(lambda: simulate(
        k, "voter", init, 0.4, N=30, rng=np.random.default_rng(108),
        selection="lex", record_log=True))
    assert_runs_equal(a, b)


def test_walk_estimates_identical():
    k = nearest_neighbor_kernel(3)

    def gammas():
        return estimate_gamma_e(k, 4.0, 400, np.random.default_rng(109))

    a, b = run_both(gammas)
    assert (a.estimate, a.se, a.bracket) == (b.estimate, b.se, b.bracket)

    a, b = run_both(lambda: estimate_beta_delta_coal(
        k, 4.0, 300, np.random.default_rng(110)))
    assert (a[0].estimate, a[1].estimate) == (b[0].estimate, b[1].estimate)

    a, b = run_both(lambda: estimate_gamma_N(
        k, 50, 300, np.random.default_rng(111)))
    assert (a.estimate, a.se) == (b.estimate, b.se)

    A = [(0, 0, 0), (1, 0, 0), (0, 1, 1)]
    a, b = run_both(lambda: estimate_sigma(
        A, k, 50, 300, np.random.default_rng(112)))
    assert (a.estimate, a.se) == (b.estimate, b.se)


def test_duality_identical():
    k = nearest_neighbor_kernel(2)
    xi0 = [(x, y) for x in range(3) for y in range(3)]
    a, b = run_both(lambda: duality_check(
        k, 25, xi0, [(0, 0), (1, 0)], (1, 1), 0.15, 200,
        np.random.default_rng(113)))
    assert (a.lhs, a.rhs, a.z, a.p_value) == (b.lhs, b.rhs, b.z, b.p_value)


def test_forced_backend_env(monkeypatch):
    # the import-time selector honors SVLV_BACKEND; backend_for falls
    # back to Python for shapes the packed encoding cannot hold
    assert _backend.backend_for(4) is _backend._core_py
    assert _backend.backend_for(
        2, max_offset=_backend.MAX_PACKED_OFFSET + 1) is _backend._core_py
    assert _backend.backend_for(
        3, n_walkers=_backend.MAX_COMPILED_WALKERS + 1) is _backend._core_py
