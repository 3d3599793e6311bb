"""Step-kernel construction, validation, and moment oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svlv.kernels import (FIXED, LONG_RANGE, KernelError, ScalingParams,
                          build_fixed_kernel, build_long_range_kernel,
                          kernel_from_json, kernel_id, kernel_to_json,
                          local_density, nearest_neighbor_kernel)


def moment_oracle(offsets, probs, scale=1.0):
    """Per-coordinate second moment computed directly from the table."""
    return sum(p * (o[0] / scale) ** 2 for o, p in zip(offsets, probs))


def test_nearest_neighbor_d3():
    k = nearest_neighbor_kernel(3)
    assert k.support_size == 6
    assert np.isclose(k.probs.sum(), 1.0)
    assert k.sigma2 == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert k.sigma2 == pytest.approx(moment_oracle(k.offsets, k.probs))
    m2 = np.asarray(k.second_moment_matrix(), dtype=float)
    np.testing.assert_allclose(m2, np.eye(3) / 3.0, atol=1e-15)


def test_long_range_d1_m2_variance():
    # uniform on {-2,-1,1,2}: E x^2 = 2.5, normalized by M^2 = 4
    k = build_long_range_kernel(1, 2)
    assert k.support_size == 4
    assert k.sigma2 == pytest.approx(0.625, abs=1e-15)
    assert k.sigma2 == pytest.approx(
        moment_oracle(k.offsets, k.probs, scale=2.0))
    assert k.sigma2_limit == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_long_range_support_excludes_origin():
    k = build_long_range_kernel(2, 3)
    assert k.support_size == 7 * 7 - 1
    assert (0, 0) not in k.offsets
    assert k.variant == LONG_RANGE


def test_fixed_kernel_rejections():
    with pytest.raises(KernelError):
        build_fixed_kernel(1, [((0,), 1.0)])            # origin mass
    with pytest.raises(KernelError):
        build_fixed_kernel(1, [((1,), 1.0)])            # asymmetric
    with pytest.raises(KernelError):
        build_fixed_kernel(1, [((1,), 0.6), ((-1,), 0.6)])   # sum != 1
    with pytest.raises(KernelError):
        build_fixed_kernel(1, [((1,), -0.5), ((-1,), 1.5)])  # negative
    with pytest.raises(KernelError):
        build_fixed_kernel(2, [((1, 0), 0.5), ((-1, 0), 0.5)])  # anisotropic


def test_json_round_trip():
    for k in (nearest_neighbor_kernel(2), build_long_range_kernel(2, 4),
              build_fixed_kernel(1, [((2,), 0.1), ((-2,), 0.1),
                                     ((1,), 0.4), ((-1,), 0.4)])):
        k2 = kernel_from_json(kernel_to_json(k))
        assert k2.d == k.d and k2.variant == k.variant
        assert k2.offsets == k.offsets
        np.testing.assert_array_equal(k2.probs, k.probs)
        assert kernel_id(k2) == kernel_id(k)


def test_kernel_id_distinguishes():
    ids = {kernel_id(nearest_neighbor_kernel(2)),
           kernel_id(nearest_neighbor_kernel(3)),
           kernel_id(build_long_range_kernel(2, 4)),
           kernel_id(build_long_range_kernel(2, 8))}
    assert len(ids) == 4


def test_local_density_brute_force():
    k = nearest_neighbor_kernel(2)
    occupied = {(0, 0), (1, 0), (0, 1)}
    f0, f1 = local_density(k, occupied, (0, 0))
    assert f1 == pytest.approx(0.5)      # 2 of 4 neighbors occupied
    assert f0 == pytest.approx(0.5)
    f0, f1 = local_density(k, occupied, (5, 5))
    assert (f0, f1) == (1.0, 0.0)


def test_sampling_matches_probs():
    k = build_fixed_kernel(1, [((2,), 0.1), ((-2,), 0.1),
                               ((1,), 0.4), ((-1,), 0.4)])
    rng = np.random.default_rng(0)
    draws = [tuple(k.sample_step(rng)) for _ in range(20000)]
    freq = {off: draws.count(off) / len(draws) for off in k.offsets}
    for off, p in zip(k.offsets, k.probs):
        assert freq[off] == pytest.approx(p, abs=0.02)


def test_scaling_params():
    with pytest.raises(KernelError):
        ScalingParams(0, nearest_neighbor_kernel(2))
    s = ScalingParams(100, nearest_neighbor_kernel(2))
    assert s.ell == pytest.approx(10.0)
    s = ScalingParams(100, build_long_range_kernel(2, 4))
    assert s.ell == pytest.approx(40.0)
    assert s.N_prime == 100


@settings(max_examples=50, deadline=None)
@given(m=st.integers(min_value=1, max_value=10),
       d=st.integers(min_value=1, max_value=3))
def test_long_range_family_properties(m, d):
    k = build_long_range_kernel(d, m)
    assert k.support_size == (2 * m + 1) ** d - 1
    assert np.isclose(k.probs.sum(), 1.0, atol=1e-12)
    # symmetric by construction: every offset's negation is present
    s = set(k.offsets)
    assert all(tuple(-c for c in off) in s for off in k.offsets)
    assert k.sigma2 <= 1.0 and k.sigma2 > 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(min_value=1, max_value=5),
                          st.floats(min_value=0.05, max_value=1.0)),
                min_size=1, max_size=4, unique_by=lambda t: t[0]))
def test_fixed_symmetric_tables_validate(pairs):
    total = 2.0 * sum(w for _, w in pairs)
    table = []
    for off, w in pairs:
        table.append(((off,), w / total))
        table.append(((-off,), w / total))
    k = build_fixed_kernel(1, table)
    assert k.variant == FIXED
    assert np.isclose(k.probs.sum(), 1.0, atol=1e-12)
    assert k.sigma2 == pytest.approx(
        moment_oracle(k.offsets, k.probs), rel=1e-12)
    k2 = kernel_from_json(kernel_to_json(k))
    assert k2.offsets == k.offsets
