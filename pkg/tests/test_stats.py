"""Small-sample statistics helpers used by the verification harness."""

import numpy as np
import pytest
from scipy import stats as sps

from svlv.stats import (Moments, binomial_se, chi2_two_sample, ladder_verdict,
                        mean_se, ols_slope, proportion, two_proportion_z)


def test_mean_se_against_numpy():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=200)
    m, se = mean_se(xs)
    assert m == pytest.approx(xs.mean())
    assert se == pytest.approx(xs.std(ddof=1) / np.sqrt(len(xs)))


def test_mean_se_degenerate():
    m, se = mean_se([3.0])
    assert m == 3.0 and not np.isfinite(se)


def test_ols_exact_line():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    slope, intercept, se = ols_slope(x, 2.0 * x - 1.0)
    assert slope == pytest.approx(2.0, abs=1e-12)
    assert intercept == pytest.approx(-1.0, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_ols_matches_scipy():
    rng = np.random.default_rng(1)
    x = np.arange(30.0)
    y = 0.5 * x + rng.normal(size=30)
    slope, intercept, se = ols_slope(x, y)
    ref = sps.linregress(x, y)
    assert slope == pytest.approx(ref.slope)
    assert intercept == pytest.approx(ref.intercept)
    assert se == pytest.approx(ref.stderr)


def test_chi2_matches_scipy():
    c1 = np.array([30, 45, 25, 10])
    c2 = np.array([22, 51, 30, 7])
    stat, dof, p = chi2_two_sample(c1, c2)
    obs = np.vstack([c1, c2])
    ref = sps.chi2_contingency(obs, correction=False)
    assert stat == pytest.approx(ref.statistic)
    assert dof == ref.dof
    assert p == pytest.approx(ref.pvalue)


def test_chi2_degenerate_identical():
    stat, dof, p = chi2_two_sample([100], [100])
    assert (stat, dof, p) == (0.0, 0, 1.0)


def test_chi2_pools_sparse_bins():
    # bins with tiny expected counts must not blow up the statistic
    stat, dof, p = chi2_two_sample([1000, 1, 0, 0], [1000, 0, 1, 0])
    assert np.isfinite(stat) and 0.0 <= p <= 1.0


def test_two_proportion_z():
    z, p = two_proportion_z(50, 100, 60, 100)
    pool = 110 / 200
    want = (0.5 - 0.6) / np.sqrt(pool * (1 - pool) * (1 / 100 + 1 / 100))
    assert z == pytest.approx(want)
    assert p == pytest.approx(2 * sps.norm.sf(abs(want)))
    z, p = two_proportion_z(30, 100, 30, 100)
    assert z == 0.0 and p == 1.0


def test_proportion_and_binomial_se():
    p, se = proportion(7, 10)
    assert p == 0.7
    assert se == pytest.approx(binomial_se(0.7, 10))
    assert binomial_se(0.5, 100) == pytest.approx(0.05)
    assert binomial_se(0.0, 100) >= 0.0


def test_moments():
    m = Moments.of([1.0, 2.0, 3.0])
    assert m.n == 3 and m.mean == 2.0
    assert m.var == pytest.approx(1.0)
    assert m.se_mean == pytest.approx(np.sqrt(1.0 / 3.0))


def test_ladder_verdict_pass():
    v = ladder_verdict([1.0, 0.8, 0.67], [0.05, 0.04, 0.03], 2 / 3)
    assert v["verdict"] == "pass"
    assert abs(v["final_z"]) < 2


def test_ladder_verdict_trend():
    # distances shrink monotonically but the final rung is still biased
    v = ladder_verdict([1.0, 0.9, 0.85], [0.02, 0.02, 0.02], 2 / 3)
    assert v["verdict"] == "trend"
    assert v["trend_z"] > 0


def test_ladder_verdict_fail():
    v = ladder_verdict([0.9, 0.95, 1.0], [0.01, 0.01, 0.01], 2 / 3)
    assert v["verdict"] == "fail"


def test_ladder_verdict_single_rung():
    assert ladder_verdict([0.67], [0.03], 2 / 3)["verdict"] == "pass"
    assert ladder_verdict([0.9], [0.01], 2 / 3)["verdict"] == "fail"
