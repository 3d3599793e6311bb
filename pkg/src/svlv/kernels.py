"""Finite-support step kernels on the integer lattice and their rescaling.

Two kernel families are supported: a long-range family, uniform on the
lattice points of [-M, M]^d with the origin removed, and user-supplied
fixed kernels given as an offset -> probability table.  Internally all
coordinates are unscaled integers; division by the lattice stretch
``ell = M * sqrt(N)`` (long-range) or ``sqrt(N)`` (fixed) happens only
when empirical measures are emitted.

Uniform and nearest-neighbour constructions keep an exact Fraction copy
of the weights so moment computations used as test oracles are exact;
user tables are validated against float tolerances instead.
"""

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

import numpy as np

SUM_TOL = 1e-12

LONG_RANGE = "long_range"
FIXED = "fixed"


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """A validated finite-support symmetric step distribution.

    offsets are sorted lexicographically; ``probs[i]`` is the weight of
    ``offsets[i]``.  ``exact`` holds Fraction weights when the kernel was
    built from an exact construction, else None.  ``sigma2`` is the
    per-coordinate variance of the normalized step (offset / M_N for the
    long-range family, the raw offset for fixed kernels); isotropy of the
    second-moment matrix is enforced at build time.
    """

    d: int
    variant: str
    offsets: tuple
    probs: np.ndarray
    M_N: int = 1
    exact: tuple = None
    sigma2: float = field(default=None)
    sigma2_limit: float = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        _validate_kernel(self)
        m2 = self.second_moment_matrix()
        sig = float(m2[0][0])
        for i in range(self.d):
            for j in range(self.d):
                want = sig if i == j else 0.0
                if abs(float(m2[i][j]) - want) > SUM_TOL:
                    raise KernelError(
                        "second-moment matrix is not isotropic: "
                        f"m2[{i}][{j}]={float(m2[i][j])!r} vs diag {sig!r}"
                    )
        object.__setattr__(self, "sigma2", sig)
        limit = 1.0 / 3.0 if self.variant == LONG_RANGE else sig
        object.__setattr__(self, "sigma2_limit", limit)

    @property
    def support_size(self):
        return len(self.offsets)

    def prob_of(self, offset):
        i = self._index().get(tuple(offset))
        return 0.0 if i is None else float(self.probs[i])

    def _index(self):
        idx = getattr(self, "_idx_cache", None)
        if idx is None:
            idx = {off: i for i, off in enumerate(self.offsets)}
            object.__setattr__(self, "_idx_cache", idx)
        return idx

    def cumsum(self):
        """Inclusive cumulative weights aligned with ``offsets``.

        The last entry is forced to 1.0 so inverse-CDF sampling with a
        uniform in [0, 1) can never fall off the end.
        """
        c = getattr(self, "_cum_cache", None)
        if c is None:
            c = np.cumsum(self.probs)
            c[-1] = 1.0
            object.__setattr__(self, "_cum_cache", c)
        return c

    def sample_index(self, u):
        """Map one uniform draw to an offset index (shared by all backends)."""
        return int(np.searchsorted(self.cumsum(), u, side="right"))

    def sample_step(self, rng):
        return self.offsets[self.sample_index(rng.random())]

    def second_moment_matrix(self):
        """Covariance of the normalized step; exact Fractions when available."""
        scale = self.M_N if self.variant == LONG_RANGE else 1
        if self.exact is not None:
            m = [[Fraction(0)] * self.d for _ in range(self.d)]
            for off, w in zip(self.offsets, self.exact):
                for i in range(self.d):
                    for j in range(self.d):
                        m[i][j] += w * Fraction(off[i], scale) * Fraction(off[j], scale)
            return m
        arr = np.array(self.offsets, dtype=float) / scale
        return (arr[:, :, None] * arr[:, None, :] * self.probs[:, None, None]).sum(axis=0)

    def offsets_array(self):
        return np.array(self.offsets, dtype=np.int64).reshape(len(self.offsets), self.d)


def _validate_kernel(k):
    if k.d < 1:
        raise KernelError(f"dimension must be >= 1, got {k.d}")
    if k.variant not in (LONG_RANGE, FIXED):
        raise KernelError(f"unknown variant {k.variant!r}")
    if len(k.offsets) == 0:
        raise KernelError("kernel has empty support")
    if len(k.offsets) != len(k.probs):
        raise KernelError("offsets/probs length mismatch")
    if list(k.offsets) != sorted(k.offsets):
        raise KernelError("offsets must be lexicographically sorted")
    index = {}
    for i, off in enumerate(k.offsets):
        if len(off) != k.d:
            raise KernelError(f"offset {off} has wrong dimension")
        if any(not isinstance(c, int) for c in off):
            raise KernelError(f"offset {off} has non-integer coordinates")
        if off in index:
            raise KernelError(f"duplicate offset {off}")
        index[off] = i
    origin = (0,) * k.d
    if origin in index:
        raise KernelError("kernel must put no mass at the origin")
    for off, p in zip(k.offsets, k.probs):
        if not (p > 0.0):
            raise KernelError(f"non-positive weight {p!r} at {off}")
        neg = tuple(-c for c in off)
        j = index.get(neg)
        if j is None or abs(k.probs[j] - p) > SUM_TOL:
            raise KernelError(f"kernel is not symmetric at {off}")
    total = math.fsum(float(p) for p in k.probs)
    if abs(total - 1.0) > SUM_TOL:
        raise KernelError(f"weights sum to {total!r}, expected 1 within {SUM_TOL}")


def build_long_range_kernel(d, M):
    """Uniform kernel on ([-M, M]^d intersect Z^d) minus the origin."""
    if M < 1:
        raise KernelError(f"M must be >= 1, got {M}")
    offsets = [off for off in product(range(-M, M + 1), repeat=d) if any(off)]
    offsets.sort()
    n = len(offsets)
    w = Fraction(1, n)
    probs = np.full(n, 1.0 / n)
    return KernelSpec(
        d=d, variant=LONG_RANGE, offsets=tuple(offsets), probs=probs, M_N=M,
        exact=tuple(w for _ in range(n)),
    )


def build_fixed_kernel(d, table, exact=None):
    """Fixed kernel from an iterable of (offset, probability) pairs."""
    items = sorted((tuple(int(c) for c in off), float(p)) for off, p in table)
    offsets = tuple(off for off, _ in items)
    probs = np.array([p for _, p in items])
    if exact is not None:
        exact = tuple(exact[off] for off in offsets)
    return KernelSpec(d=d, variant=FIXED, offsets=offsets, probs=probs, M_N=1, exact=exact)


def nearest_neighbor_kernel(d):
    """Uniform kernel on the 2d unit vectors; per-coordinate variance 1/d."""
    table = []
    exact = {}
    for i in range(d):
        for s in (-1, 1):
            off = tuple(s if j == i else 0 for j in range(d))
            table.append((off, 1.0 / (2 * d)))
            exact[off] = Fraction(1, 2 * d)
    return build_fixed_kernel(d, table, exact=exact)


@dataclass(frozen=True)
class ScalingParams:
    """Rescaling bookkeeping for one level N of the family.

    ``ell`` is the lattice stretch: sites live on Z^d and are mapped to
    site / ell when measures are emitted; particle mass is 1/N.  The
    auxiliary density level equals N throughout.
    """

    N: int
    kernel: KernelSpec

    def __post_init__(self):
        if self.N < 1:
            raise KernelError(f"N must be >= 1, got {self.N}")

    @property
    def N_prime(self):
        return self.N

    @property
    def ell(self):
        base = math.sqrt(self.N)
        return self.kernel.M_N * base if self.kernel.variant == LONG_RANGE else base


def local_density(kernel, occupied, site):
    """(f0, f1) seen from ``site``: kernel-weighted vacant/occupied fractions.

    ``occupied`` is any container supporting ``in``.  f1 is the direct
    weighted sum over occupied neighbours and f0 is defined as 1 - f1, so
    the pair sums to one exactly.
    """
    site = tuple(site)
    f1 = 0.0
    for off, p in zip(kernel.offsets, kernel.probs):
        if tuple(a + b for a, b in zip(site, off)) in occupied:
            f1 += float(p)
    return 1.0 - f1, f1


def kernel_to_json(kernel):
    if kernel.variant == LONG_RANGE:
        doc = {"d": kernel.d, "variant": LONG_RANGE, "M_N": kernel.M_N}
    else:
        doc = {
            "d": kernel.d,
            "variant": FIXED,
            "table": [[list(off), float(p)] for off, p in zip(kernel.offsets, kernel.probs)],
        }
    return json.dumps(doc)


def kernel_from_json(text):
    doc = json.loads(text)
    try:
        d = int(doc["d"])
        variant = doc["variant"]
    except (KeyError, TypeError) as exc:
        raise KernelError(f"malformed kernel document: {exc}") from exc
    if variant == LONG_RANGE:
        return build_long_range_kernel(d, int(doc["M_N"]))
    if variant == FIXED:
        return build_fixed_kernel(d, [(tuple(off), p) for off, p in doc["table"]])
    raise KernelError(f"unknown variant {variant!r}")


def kernel_id(kernel):
    """Short stable identifier used in result records."""
    if kernel.variant == LONG_RANGE:
        return f"lr(d={kernel.d},M={kernel.M_N})"
    return f"fixed(d={kernel.d},K={kernel.support_size},s2={kernel.sigma2:.6g})"
