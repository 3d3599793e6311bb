"""Analytic predictions of the limiting martingale problem.

The limit's total mass is a Feller branching diffusion
dZ = theta Z dt + sqrt(b Z) dW, absorbed at zero.  Its transition law is
a Poisson-mixed Gamma, so terminal masses can be drawn exactly; an
Euler-Maruyama oracle with full truncation is kept alongside because
the closed-form moment and extinction formulas are implementer-derived
and must be validated against an independent discretization before any
gate trusts them.

Spatial first moments evolve by the heat semigroup with an exponential
mass factor; Gaussian bumps stay Gaussian under that flow, which keeps
the prediction closed-form for the audit catalog.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .observables import Constant, GaussianBump

__all__ = [
    "MPParams", "feller_moments", "extinction_probability",
    "simulate_feller", "feller_path", "euler_feller",
    "heat_blur", "sbm_mean",
]


@dataclass(frozen=True)
class MPParams:
    """Limit parameters: branching rate, drift, diffusivity.

    ``note`` records where the numbers came from (which estimator or
    closed form supplied them), since the same triple is assembled along
    several routes.
    """

    branching: float
    drift: float
    sigma2: float = 1.0
    note: str = ""

    def __post_init__(self):
        if self.branching < 0.0:
            raise ValueError("branching rate must be >= 0")
        if self.sigma2 <= 0.0:
            raise ValueError("diffusivity must be > 0")

    @classmethod
    def from_gamma(cls, gamma, drift, sigma2=1.0, note=""):
        """Branching enters the limit as twice the escape constant."""
        return cls(2.0 * float(gamma), float(drift), float(sigma2), note)


def _check_zt(z0, t):
    if z0 < 0.0:
        raise ValueError("initial mass must be >= 0")
    if t < 0.0:
        raise ValueError("time must be >= 0")


def feller_moments(z0, t, b, theta):
    """(mean, variance) of Z_t started from z0.

    mean = z0 e^{theta t}; variance = b z0 e^{theta t}
    (e^{theta t} - 1)/theta, read as b z0 t at theta = 0.
    """
    z0, t, b, theta = float(z0), float(t), float(b), float(theta)
    _check_zt(z0, t)
    if b < 0.0:
        raise ValueError("branching rate must be >= 0")
    growth = math.exp(theta * t)
    mean = z0 * growth
    if theta == 0.0:
        var = b * z0 * t
    else:
        var = b * z0 * growth * math.expm1(theta * t) / theta
    return mean, var


def _gamma_scale(b, theta, t):
    """Scale of the Gamma jumps in the exact transition over time t."""
    if theta == 0.0:
        return 0.5 * b * t
    return 0.5 * b * math.expm1(theta * t) / theta


def extinction_probability(z0, t, b, theta):
    """P(Z_t = 0): exp of minus the Poisson mean of the transition."""
    z0, t, b, theta = float(z0), float(t), float(b), float(theta)
    _check_zt(z0, t)
    if z0 == 0.0:
        return 1.0
    if t == 0.0 or b == 0.0:
        return 0.0
    c = _gamma_scale(b, theta, t)
    return math.exp(-z0 * math.exp(theta * t) / c)


def _transition(z, dt, b, theta, rng):
    """Exact one-step transition for a vector of masses."""
    growth = math.exp(theta * dt)
    if b == 0.0:
        return z * growth
    c = _gamma_scale(b, theta, dt)
    m = z * (growth / c)
    k = rng.poisson(m)
    out = np.zeros_like(z)
    pos = k > 0
    if np.any(pos):
        out[pos] = rng.gamma(k[pos], c)
    return out


def simulate_feller(z0, t, b, theta, rng, reps=None):
    """Draw Z_t exactly from the Poisson-mixed Gamma transition.

    Returns a float when ``reps`` is None, else a (reps,) array.  The
    law is exact for any t, so there is no step-size bias to document;
    the Euler route below exists to validate the closed forms, not to
    run them.
    """
    z0, t, b, theta = float(z0), float(t), float(b), float(theta)
    _check_zt(z0, t)
    if b < 0.0:
        raise ValueError("branching rate must be >= 0")
    n = 1 if reps is None else int(reps)
    z = np.full(n, z0)
    if t > 0.0 and z0 > 0.0:
        z = _transition(z, t, b, theta, rng)
    return float(z[0]) if reps is None else z


def feller_path(z0, times, b, theta, rng):
    """One exact path sampled at the given nondecreasing times."""
    z0, b, theta = float(z0), float(b), float(theta)
    ts = [float(v) for v in times]
    if any(tb < ta for ta, tb in zip(ts, ts[1:])) or (ts and ts[0] < 0.0):
        raise ValueError("times must be nondecreasing and >= 0")
    _check_zt(z0, 0.0)
    out = []
    cur_t = 0.0
    z = np.full(1, z0)
    for t in ts:
        dt = t - cur_t
        if dt > 0.0 and z[0] > 0.0:
            z = _transition(z, dt, b, theta, rng)
        cur_t = t
        out.append(float(z[0]))
    return np.array(out)


def euler_feller(z0, t, b, theta, rng, reps, dt=1e-3):
    """Full-truncation Euler-Maruyama oracle, absorbed at zero.

    Bias is O(dt) in the moments; keep dt small relative to the Monte
    Carlo error of whatever comparison uses this.
    """
    z0, t, b, theta = float(z0), float(t), float(b), float(theta)
    _check_zt(z0, t)
    reps = int(reps)
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if t == 0.0:
        return np.full(reps, z0)
    n = max(1, int(math.ceil(t / float(dt))))
    h = t / n
    z = np.full(reps, z0)
    for _ in range(n):
        noise = rng.standard_normal(reps)
        z = z + theta * z * h + np.sqrt(b * z * h) * noise
        np.maximum(z, 0.0, out=z)
    return z


# -- spatial first moment ----------------------------------------------------


def heat_blur(phi, tau):
    """Heat semigroup at variance ``tau`` applied to a closed-form field.

    Constants are fixed points; a Gaussian bump widens to
    sqrt(width^2 + tau) with the mass-preserving amplitude factor.
    """
    tau = float(tau)
    if tau < 0.0:
        raise ValueError("blur variance must be >= 0")
    if isinstance(phi, Constant):
        return phi
    if isinstance(phi, GaussianBump):
        if tau == 0.0:
            return phi
        w2 = phi.width * phi.width
        d = len(phi.center)
        return GaussianBump(
            phi.center, math.sqrt(w2 + tau),
            phi.amplitude * (w2 / (w2 + tau)) ** (0.5 * d),
        )
    raise ValueError("closed-form heat evolution supports constants and "
                     "Gaussian bumps only")


def sbm_mean(x0, phi, t, theta, sigma2):
    """E X_t(phi) for the limit started at x0: e^{theta t} x0(P_t phi).

    ``x0`` is anything with ``integrate`` (an EmpiricalMeasure); ``phi``
    must be a static constant or Gaussian bump.
    """
    t = float(t)
    if t < 0.0:
        raise ValueError("time must be >= 0")
    if getattr(phi, "time_dependent", False):
        raise ValueError("closed-form mean needs a static field")
    blurred = heat_blur(phi, float(sigma2) * t)
    return math.exp(float(theta) * t) * x0.integrate(blurred)
