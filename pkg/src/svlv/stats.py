"""Small statistics toolbox behind the verification gates.

Everything here is classical: binomial errors, pooled two-proportion
z-tests, two-sample chi-square on histograms, OLS slopes, and the
monotone-CI trend verdict used along N ladders.  scipy supplies tail
probabilities only.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2 as _chi2
from scipy.stats import norm as _norm

Z_95 = 1.959963984540054  # two-sided 5% normal quantile


def binomial_se(p, n):
    if n <= 0:
        return 0.0
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def proportion(hits, n):
    """(p_hat, se) of a binomial count."""
    if n <= 0:
        raise ValueError("proportion needs at least one trial")
    p = hits / n
    return p, binomial_se(p, n)


def two_proportion_z(hits1, n1, hits2, n2):
    """Pooled two-proportion z statistic and two-sided p-value."""
    p1, p2 = hits1 / n1, hits2 / n2
    pool = (hits1 + hits2) / (n1 + n2)
    var = pool * (1.0 - pool) * (1.0 / n1 + 1.0 / n2)
    if var == 0.0:
        return 0.0, 1.0
    z = (p1 - p2) / math.sqrt(var)
    return z, 2.0 * float(_norm.sf(abs(z)))


def chi2_two_sample(counts1, counts2):
    """Two-sample chi-square on paired histograms.

    Bins empty in both samples are dropped; expected counts come from
    the pooled proportions.  Returns (statistic, dof, p_value).
    """
    c1 = np.asarray(counts1, dtype=float)
    c2 = np.asarray(counts2, dtype=float)
    if c1.shape != c2.shape:
        raise ValueError("histograms must share their binning")
    keep = (c1 + c2) > 0
    c1, c2 = c1[keep], c2[keep]
    if len(c1) < 2:
        return 0.0, 0, 1.0
    n1, n2 = c1.sum(), c2.sum()
    pooled = (c1 + c2) / (n1 + n2)
    e1, e2 = n1 * pooled, n2 * pooled
    stat = float(((c1 - e1) ** 2 / e1).sum() + ((c2 - e2) ** 2 / e2).sum())
    dof = len(c1) - 1
    return stat, dof, float(_chi2.sf(stat, dof))


def mean_se(xs):
    """(sample mean, standard error of the mean)."""
    xs = np.asarray(xs, dtype=float)
    n = len(xs)
    if n == 0:
        raise ValueError("mean_se of an empty sample")
    m = float(xs.mean())
    if n == 1:
        return m, float("inf")
    return m, float(xs.std(ddof=1) / math.sqrt(n))


@dataclass(frozen=True)
class Moments:
    n: int
    mean: float
    var: float
    se_mean: float

    @classmethod
    def of(cls, xs):
        xs = np.asarray(xs, dtype=float)
        n = len(xs)
        m, se = mean_se(xs)
        v = float(xs.var(ddof=1)) if n > 1 else float("nan")
        return cls(n=n, mean=m, var=v, se_mean=se)


def ols_slope(x, y):
    """Least-squares line fit: (slope, intercept, slope_se)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 2:
        raise ValueError("slope needs at least two points")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("slope needs at least two distinct x values")
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = ym - slope * xm
    if n == 2:
        return slope, intercept, float("inf")
    resid = y - (intercept + slope * x)
    s2 = float((resid ** 2).sum() / (n - 2))
    return slope, intercept, math.sqrt(s2 / sxx)


def ladder_verdict(estimates, ses, target, alpha=0.05):
    """Verdict for a ladder of estimates expected to approach ``target``.

    "pass": the final rung's CI covers the target.  "trend": it does
    not, but the distances to the target are nonincreasing along the
    ladder and the first-vs-last decrease is one-sided significant at
    ``alpha``.  "fail" otherwise.  Limit theorems come with no rate, so
    the trend verdict is the honest middle ground on desk-scale ladders.
    """
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.shape != se.shape or len(est) == 0:
        raise ValueError("estimates and ses must be equal-length, nonempty")
    zc = float(_norm.isf(alpha / 2.0))
    dist = np.abs(est - target)
    out = {
        "target": float(target),
        "estimates": [float(v) for v in est],
        "ses": [float(v) for v in se],
        "final_z": float((est[-1] - target) / se[-1]) if se[-1] > 0 else 0.0,
    }
    if dist[-1] <= zc * se[-1]:
        out["verdict"] = "pass"
        return out
    if len(est) >= 2:
        ordered = bool(np.all(np.diff(dist) <= 0.0))
        spread = math.sqrt(se[0] ** 2 + se[-1] ** 2)
        z_trend = (dist[0] - dist[-1]) / spread if spread > 0 else 0.0
        out["trend_z"] = float(z_trend)
        if ordered and z_trend > float(_norm.isf(alpha)):
            out["verdict"] = "trend"
            return out
    out["verdict"] = "fail"
    return out
