"""Empirical measures, test functions, and pathwise decomposition audits.

The engines report configurations, exact path integrals, and (optionally)
a flip log; everything measure-valued lives here.  ``EmpiricalMeasure``
carries the rescaled atoms of a configuration.  A ``TestFn`` is a scalar
field with analytic gradient, laplacian, and norm bounds.  ``decompose``
replays a recorded run and splits X_t(phi) into initial value, three
drift integrals, and a martingale part, together with both pieces of the
predictable quadratic variation.

The reported martingale column is the identity remainder
X_t(phi_t) - X_0(phi_0) - drift.  The residual column compares that
remainder against an independent computation (flip-by-flip jump sum
minus the exact compensator integral), so it is a genuine consistency
check and not a tautology; between events every integrand is polynomial
in time of degree at most two, and the quadrature used is exact for
those.

Replay cost is linear in events times the activation stencil.  The
pathwise audits are meant for desk-scale runs; the long verification
ladders read the engines' built-in integrals instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import ScalingParams
from .perturbation import EMPTY, PerturbationTable, kernel_fingerprint

__all__ = [
    "TestFn", "Constant", "GaussianBump", "SmoothIndicator", "TimeDependent",
    "catalog", "fd_gradient", "fd_laplacian", "lip_audit",
    "EmpiricalMeasure", "empirical_measure", "integrate",
    "DecompositionReport", "decompose",
    "perturbation_statistic", "generator_gap",
]


# -- test functions ----------------------------------------------------------


def _points(x):
    """Coerce to an (n, d) float array; flag whether input was one point."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return arr.reshape(1, -1), True
    return arr, False


class TestFn:
    """Scalar field on R^d with analytic derivatives and norm bounds.

    ``sup_norm`` bounds |phi| and ``lip_norm`` bounds |phi|_inf plus the
    best Lipschitz constant.  Static fields return themselves from
    ``at_time``; schedules return the blended snapshot.
    """

    time_dependent = False
    sup_norm = math.inf
    lip_norm = math.inf

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def laplacian(self, x):
        raise NotImplementedError

    def at_time(self, t):
        return self

    def time_derivative(self, t, x):
        _, single = _points(x)
        return 0.0 if single else np.zeros(len(_points(x)[0]))

    def segments(self, t_end):
        """Piecewise-linear-in-time cover of [0, t_end]: (ta, tb, fa, fb)."""
        return [(0.0, float(t_end), self, self)]


class Constant(TestFn):
    def __init__(self, c):
        self.c = float(c)
        self.sup_norm = abs(self.c)
        self.lip_norm = abs(self.c)

    def __repr__(self):
        return f"Constant({self.c!r})"

    def value(self, x):
        pts, single = _points(x)
        return self.c if single else np.full(len(pts), self.c)

    def gradient(self, x):
        pts, single = _points(x)
        g = np.zeros_like(pts)
        return g[0] if single else g

    def laplacian(self, x):
        pts, single = _points(x)
        return 0.0 if single else np.zeros(len(pts))


class GaussianBump(TestFn):
    """amplitude * exp(-|x - center|^2 / (2 width^2))."""

    def __init__(self, center, width, amplitude=1.0):
        self.center = np.asarray(center, dtype=float).reshape(-1)
        self.width = float(width)
        self.amplitude = float(amplitude)
        if self.width <= 0.0:
            raise ValueError("width must be positive")
        self.sup_norm = abs(self.amplitude)
        # |grad| peaks at |x-c| = width with value |A| e^{-1/2} / width.
        self.lip_norm = abs(self.amplitude) * (1.0 + math.exp(-0.5) / self.width)

    def __repr__(self):
        return (f"GaussianBump(center={tuple(self.center)}, "
                f"width={self.width!r}, amplitude={self.amplitude!r})")

    def _diff_r2_v(self, pts):
        diff = pts - self.center
        r2 = np.einsum("ij,ij->i", diff, diff)
        v = self.amplitude * np.exp(-0.5 * r2 / (self.width * self.width))
        return diff, r2, v

    def value(self, x):
        pts, single = _points(x)
        _, _, v = self._diff_r2_v(pts)
        return float(v[0]) if single else v

    def gradient(self, x):
        pts, single = _points(x)
        diff, _, v = self._diff_r2_v(pts)
        g = -diff * (v / (self.width * self.width))[:, None]
        return g[0] if single else g

    def laplacian(self, x):
        pts, single = _points(x)
        _, r2, v = self._diff_r2_v(pts)
        w2 = self.width * self.width
        lap = v * (r2 / (w2 * w2) - pts.shape[1] / w2)
        return float(lap[0]) if single else lap


class SmoothIndicator(TestFn):
    """Radial plateau: 1 inside ``radius``, cosine ramp to 0 over ``ramp``.

    C^1 everywhere; the laplacian is the classical one away from the two
    seam spheres (where the radial second derivative jumps) and is
    reported as the interior formula on the open ramp, zero elsewhere.
    """

    def __init__(self, center, radius, ramp, amplitude=1.0):
        self.center = np.asarray(center, dtype=float).reshape(-1)
        self.radius = float(radius)
        self.ramp = float(ramp)
        self.amplitude = float(amplitude)
        if self.radius <= 0.0 or self.ramp <= 0.0:
            raise ValueError("radius and ramp must be positive")
        self.sup_norm = abs(self.amplitude)
        # steepest radial slope is A*pi/(2*ramp) at the ramp midpoint
        self.lip_norm = abs(self.amplitude) * (1.0 + math.pi / (2.0 * self.ramp))

    def __repr__(self):
        return (f"SmoothIndicator(center={tuple(self.center)}, "
                f"radius={self.radius!r}, ramp={self.ramp!r}, "
                f"amplitude={self.amplitude!r})")

    def _shell(self, pts):
        diff = pts - self.center
        s = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        inside = s <= self.radius
        beyond = s >= self.radius + self.ramp
        mid = ~inside & ~beyond
        return diff, s, inside, mid

    def value(self, x):
        pts, single = _points(x)
        _, s, inside, mid = self._shell(pts)
        v = np.zeros(len(pts))
        v[inside] = 1.0
        u = (s[mid] - self.radius) * (math.pi / self.ramp)
        v[mid] = 0.5 * (1.0 + np.cos(u))
        v *= self.amplitude
        return float(v[0]) if single else v

    def gradient(self, x):
        pts, single = _points(x)
        diff, s, _, mid = self._shell(pts)
        g = np.zeros_like(pts)
        u = (s[mid] - self.radius) * (math.pi / self.ramp)
        dds = -self.amplitude * math.pi / (2.0 * self.ramp) * np.sin(u)
        g[mid] = diff[mid] * (dds / s[mid])[:, None]
        return g[0] if single else g

    def laplacian(self, x):
        pts, single = _points(x)
        _, s, _, mid = self._shell(pts)
        lap = np.zeros(len(pts))
        u = (s[mid] - self.radius) * (math.pi / self.ramp)
        c = self.amplitude * math.pi / (2.0 * self.ramp)
        dds = -c * np.sin(u)
        d2ds = -c * (math.pi / self.ramp) * np.cos(u)
        lap[mid] = d2ds + (pts.shape[1] - 1) * dds / s[mid]
        return float(lap[0]) if single else lap


class _Blend(TestFn):
    """(1 - w) fa + w fb, the snapshot of a schedule inside one piece."""

    def __init__(self, fa, fb, w):
        self.fa = fa
        self.fb = fb
        self.w = float(w)
        self.sup_norm = (1.0 - self.w) * fa.sup_norm + self.w * fb.sup_norm
        self.lip_norm = (1.0 - self.w) * fa.lip_norm + self.w * fb.lip_norm

    def value(self, x):
        return (1.0 - self.w) * self.fa.value(x) + self.w * self.fb.value(x)

    def gradient(self, x):
        return ((1.0 - self.w) * self.fa.gradient(x)
                + self.w * self.fb.gradient(x))

    def laplacian(self, x):
        return ((1.0 - self.w) * self.fa.laplacian(x)
                + self.w * self.fb.laplacian(x))


class TimeDependent(TestFn):
    """Piecewise-linear-in-time schedule over static fields.

    ``schedule`` is a list of (time, TestFn) knots with strictly
    increasing times; between knots the field is the linear blend, and
    it is clamped to the end fields outside the knot range, so the time
    derivative is exact and piecewise constant in t.  Evaluate space
    derivatives through ``at_time``.
    """

    time_dependent = True

    def __init__(self, schedule):
        knots = [(float(t), fn) for t, fn in schedule]
        if not knots:
            raise ValueError("schedule must have at least one knot")
        times = [t for t, _ in knots]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("knot times must be strictly increasing")
        for _, fn in knots:
            if fn.time_dependent:
                raise ValueError("schedule knots must be static fields")
        self.knots = knots
        self.sup_norm = max(fn.sup_norm for _, fn in knots)
        self.lip_norm = max(fn.lip_norm for _, fn in knots)

    def value(self, x):
        raise TypeError("time-dependent field: take at_time(t) first")

    gradient = value
    laplacian = value

    def at_time(self, t):
        t = float(t)
        knots = self.knots
        if t <= knots[0][0]:
            return knots[0][1]
        if t >= knots[-1][0]:
            return knots[-1][1]
        for (ta, fa), (tb, fb) in zip(knots, knots[1:]):
            if t < tb:
                w = (t - ta) / (tb - ta)
                if w == 0.0:
                    return fa
                return _Blend(fa, fb, w)
        return knots[-1][1]

    def time_derivative(self, t, x):
        t = float(t)
        knots = self.knots
        for (ta, fa), (tb, fb) in zip(knots, knots[1:]):
            if ta <= t < tb:
                return (fb.value(x) - fa.value(x)) / (tb - ta)
        pts, single = _points(x)
        return 0.0 if single else np.zeros(len(pts))

    def segments(self, t_end):
        te = float(t_end)
        cuts = [0.0]
        for tk, _ in self.knots:
            if 0.0 < tk < te:
                cuts.append(tk)
        cuts.append(te)
        return [(a, b, self.at_time(a), self.at_time(b))
                for a, b in zip(cuts, cuts[1:]) if b > a]


def catalog(d, t_end=0.0, extent=3.0):
    """Fixed audit catalog: constant, bump, plateau, and (if t_end > 0)
    a schedule ramping the bump flat.  ``extent`` sets the spatial scale
    in rescaled coordinates."""
    center = (0.0,) * d
    bump = GaussianBump(center, width=0.5 * extent)
    fns = [
        Constant(1.0),
        bump,
        SmoothIndicator(center, radius=0.5 * extent, ramp=0.5 * extent),
    ]
    if t_end > 0.0:
        fns.append(TimeDependent([(0.0, bump), (float(t_end), Constant(1.0))]))
    return fns


def fd_gradient(fn, x, h=1e-5):
    """Central-difference gradient of a static field at one point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    g = np.zeros(len(x))
    for i in range(len(x)):
        hi = np.zeros(len(x))
        hi[i] = h
        g[i] = (fn.value(x + hi) - fn.value(x - hi)) / (2.0 * h)
    return g

def fd_laplacian(fn, x, h=1e-5):
    x = np.asarray(x, dtype=float).reshape(-1)
    base = fn.value(x)
    acc = 0.0
    for i in range(len(x)):
        hi = np.zeros(len(x))
        hi[i] = h
        acc += (fn.value(x + hi) - 2.0 * base + fn.value(x - hi)) / (h * h)
    return acc


def lip_audit(fn, points, h=1e-5):
    """Observed sup|phi| + max |grad phi| over sample points, by finite
    differences; the reported lip_norm must dominate this and should be
    close on a grid that straddles the steepest shell."""
    pts, _ = _points(points)
    best_v = 0.0
    best_g = 0.0
    for p in pts:
        best_v = max(best_v, abs(float(fn.value(p))))
        best_g = max(best_g, float(np.linalg.norm(fd_gradient(fn, p, h))))
    return best_v + best_g


# -- empirical measures ------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Atoms of equal mass at rescaled positions, one per occupied site."""

    positions: np.ndarray
    atom_mass: float

    @property
    def n_atoms(self):
        return len(self.positions)

    @property
    def total_mass(self):
        return self.atom_mass * len(self.positions)

    def integrate(self, phi, t=0.0):
        if len(self.positions) == 0:
            return 0.0
        fn = phi.at_time(t)
        return self.atom_mass * float(np.sum(fn.value(self.positions)))


def empirical_measure(config, scaling=None):
    """Measure with one atom of mass 1/N at site/ell per occupied site.

    ``config`` is a Configuration, an (n, d) array, or an iterable of
    sites; ``scaling`` defaults to the Configuration's own.
    """
    if scaling is None:
        scaling = getattr(config, "scaling", None)
    if scaling is None:
        raise ValueError("empirical_measure needs ScalingParams")
    if hasattr(config, "as_array"):
        arr = config.as_array()
    else:
        arr = np.asarray(list(config) if not isinstance(config, np.ndarray)
                         else config, dtype=float)
        if arr.size == 0:
            arr = arr.reshape(0, scaling.kernel.d)
    pos = np.asarray(arr, dtype=float) / scaling.ell
    return EmpiricalMeasure(positions=pos, atom_mass=1.0 / scaling.N_prime)


def integrate(measure, phi, t=0.0):
    return measure.integrate(phi, t)


# -- pathwise decomposition --------------------------------------------------

_REFRESH_FLIPS = 8192

# per-site record layout
_REF, _OCC, _F1, _BSUM, _DSUM = range(5)


def _site_tuple(row):
    return tuple(int(v) for v in row)


def _symmetric_weights(kernel):
    wmap = {}
    for off, p in zip(kernel.offsets, kernel.probs):
        wmap[tuple(int(c) for c in off)] = float(p)
    for off, p in wmap.items():
        neg = tuple(-c for c in off)
        if wmap.get(neg) != p:
            raise ValueError(
                "pathwise decomposition needs a symmetric step law "
                f"(weight at {off} differs from {neg}); the drift "
                "rearrangement over occupied and vacant sites fails "
                "otherwise")
    return wmap


def _pert_mode(model, kernel, d):
    """(mode, theta0, theta1, table) mirroring the engine dispatch."""
    if model == "voter" or model is None:
        return "voter", 0.0, 0.0, None
    if isinstance(model, tuple) and model and model[0] == "lv":
        return "lv", float(model[1]), float(model[2]), None
    if isinstance(model, PerturbationTable):
        if model.d != d:
            raise ValueError(f"table is {model.d}-dimensional, run is {d}")
        lv = model.lv
        if lv is not None and lv.kernel_fp == kernel_fingerprint(kernel):
            return "lv", lv.theta0, lv.theta1, None
        return "table", 0.0, 0.0, model
    raise ValueError(f"unrecognized model description {model!r}")


def _event_list(result):
    if result.log_t is None:
        raise ValueError("decomposition needs a run with record_log=True")
    return [(float(t), _site_tuple(s), bool(v))
            for t, s, v in zip(result.log_t, result.log_site, result.log_val)]


def _initial_sites(result, events):
    """Run the flip log backward from the final configuration."""
    occ = {_site_tuple(r) for r in result.final_sites}
    for _, y, val in reversed(events):
        if val:
            if y not in occ:
                raise ValueError("event log inconsistent with the final "
                                 f"configuration at {y}")
            occ.remove(y)
        else:
            if y in occ:
                raise ValueError("event log inconsistent with the final "
                                 f"configuration at {y}")
            occ.add(y)
    return sorted(occ)


class _Sums:
    """Aggregates over the current configuration, per segment endpoint.

    Two-slot lists hold sums against (phi_a, phi_b); three-slot lists
    hold the quadratic combinations (phi_a^2, phi_a phi_b, phi_b^2), so
    any integrand is an exact polynomial in the blend weight.
    """

    __slots__ = ("p1", "p2", "u", "w", "q", "qo", "g2", "g2o", "g3d",
                 "h", "z", "zo", "z2", "z2o", "k2", "k2o", "k3d")

    def __init__(self):
        self.p1 = [0.0, 0.0]    # occupied: phi
        self.p2 = [0.0, 0.0]    # occupied: generator of phi
        self.u = [0.0, 0.0]     # all sites: phi f1
        self.w = [0.0, 0.0]     # occupied: phi f1
        self.q = [0.0, 0.0]     # all sites: phi f1^2
        self.qo = [0.0, 0.0]    # occupied: phi f1^2
        self.g2 = [0.0, 0.0]    # all sites: phi * birth-table weight
        self.g2o = [0.0, 0.0]   # occupied: phi * birth-table weight
        self.g3d = [0.0, 0.0]   # occupied: phi * death-table weight (no empty key)
        self.h = [0.0, 0.0, 0.0]     # occupied: phi^2
        self.z = [0.0, 0.0, 0.0]     # all sites: phi^2 f1
        self.zo = [0.0, 0.0, 0.0]    # occupied: phi^2 f1
        self.z2 = [0.0, 0.0, 0.0]    # all sites: phi^2 f1^2
        self.z2o = [0.0, 0.0, 0.0]   # occupied: phi^2 f1^2
        self.k2 = [0.0, 0.0, 0.0]    # all sites: phi^2 * birth weight
        self.k2o = [0.0, 0.0, 0.0]   # occupied: phi^2 * birth weight
        self.k3d = [0.0, 0.0, 0.0]   # occupied: phi^2 * death weight


class _Replay:
    """Forward replay of a flip log with incremental aggregates.

    Each site record is [activation count, occupied, f1, birth weight,
    death weight]; the activation stencil is the kernel support plus
    every table offset plus the origin, matching the engines' active
    set.  Flips remove the touched sites' contributions, update state,
    and re-add them, so the aggregates track the configuration exactly
    up to float accumulation; a periodic rebuild keeps that drift well
    under the residual gate.
    """

    def __init__(self, mode, theta0, theta1, table, wmap, N, ell):
        self.mode = mode
        self.theta0 = theta0
        self.theta1 = theta1
        self.N = float(N)
        self.ell = float(ell)
        self.kern = sorted(wmap.items())
        act = {off: p for off, p in self.kern}
        d = len(next(iter(wmap)))
        act.setdefault((0,) * d, 0.0)
        self.entries = []
        self.delta_empty = 0.0
        if table is not None:
            for key in table.keys():
                b, dl = table.beta(key), table.delta(key)
                if key == EMPTY:
                    self.delta_empty = dl
                    continue
                self.entries.append((key, b, dl))
                for off in key:
                    act.setdefault(off, 0.0)
        self.act = sorted(act.items())
        self.state = {}
        self.flips = 0
        self.fa = None
        self.fb = None
        self.seg_a = 0.0
        self.seg_len = 0.0
        self.pc = {}
        self.gc = {}
        self.sums = _Sums()

    # -- phi caches, valid for one segment --

    def _phi(self, x):
        c = self.pc.get(x)
        if c is None:
            pos = np.array(x, dtype=float)
            pos /= self.ell
            va = float(self.fa.value(pos))
            vb = va if self.fb is self.fa else float(self.fb.value(pos))
            c = (va, vb)
            self.pc[x] = c
        return c

    def _gen(self, x):
        c = self.gc.get(x)
        if c is None:
            va, vb = self._phi(x)
            same = self.fb is self.fa
            sa = 0.0
            sb = 0.0
            for e, p in self.kern:
                na, nb = self._phi(tuple(xi + ei for xi, ei in zip(x, e)))
                sa += p * (na - va)
                if not same:
                    sb += p * (nb - vb)
            c = (self.N * sa, self.N * sa if same else self.N * sb)
            self.gc[x] = c
        return c

    # -- aggregate maintenance --

    def _acc(self, x, rec, s):
        va, vb = self._phi(x)
        S = self.sums
        aa = va * va
        ab = va * vb
        bb = vb * vb
        f1 = rec[_F1]
        if f1 != 0.0:
            f2 = f1 * f1
            v = S.u
            v[0] += s * va * f1
            v[1] += s * vb * f1
            v = S.q
            v[0] += s * va * f2
            v[1] += s * vb * f2
            v = S.z
            v[0] += s * aa * f1
            v[1] += s * ab * f1
            v[2] += s * bb * f1
            v = S.z2
            v[0] += s * aa * f2
            v[1] += s * ab * f2
            v[2] += s * bb * f2
        bs = rec[_BSUM]
        if bs != 0.0:
            v = S.g2
            v[0] += s * va * bs
            v[1] += s * vb * bs
            v = S.k2
            v[0] += s * aa * bs
            v[1] += s * ab * bs
            v[2] += s * bb * bs
        if rec[_OCC]:
            v = S.p1
            v[0] += s * va
            v[1] += s * vb
            ga, gb = self._gen(x)
            v = S.p2
            v[0] += s * ga
            v[1] += s * gb
            v = S.h
            v[0] += s * aa
            v[1] += s * ab
            v[2] += s * bb
            if f1 != 0.0:
                f2 = f1 * f1
                v = S.w
                v[0] += s * va * f1
                v[1] += s * vb * f1
                v = S.qo
                v[0] += s * va * f2
                v[1] += s * vb * f2
                v = S.zo
                v[0] += s * aa * f1
                v[1] += s * ab * f1
                v[2] += s * bb * f1
                v = S.z2o
                v[0] += s * aa * f2
                v[1] += s * ab * f2
                v[2] += s * bb * f2
            if bs != 0.0:
                v = S.g2o
                v[0] += s * va * bs
                v[1] += s * vb * bs
                v = S.k2o
                v[0] += s * aa * bs
                v[1] += s * ab * bs
                v[2] += s * bb * bs
            ds = rec[_DSUM]
            if ds != 0.0:
                v = S.g3d
                v[0] += s * va * ds
                v[1] += s * vb * ds
                v = S.k3d
                v[0] += s * aa * ds
                v[1] += s * ab * ds
                v[2] += s * bb * ds

    def _table_sums(self, x, rec):
        st = self.state
        bs = 0.0
        ds = 0.0
        for key, b, dl in self.entries:
            for off in key:
                nb = st.get(tuple(xi + oi for xi, oi in zip(x, off)))
                if nb is None or not nb[_OCC]:
                    break
            else:
                bs += b
                ds += dl
        rec[_BSUM] = bs
        rec[_DSUM] = ds

    def set_segment(self, ta, tb, fa, fb):
        self.seg_a = ta
        self.seg_len = tb - ta
        self.fa = fa
        self.fb = fb
        self.pc = {}
        self.gc = {}
        self.sums = _Sums()
        for x, rec in self.state.items():
            self._acc(x, rec, 1.0)

    def w_at(self, t):
        if self.seg_len <= 0.0:
            return 0.0
        return (t - self.seg_a) / self.seg_len

    def flip(self, y, to_occ):
        st = self.state
        touched = []
        for a, pa in self.act:
            x = tuple(yi - ai for yi, ai in zip(y, a))
            rec = st.get(x)
            if rec is None:
                rec = [0, False, 0.0, 0.0, 0.0]
                st[x] = rec
            self._acc(x, rec, -1.0)
            touched.append((x, rec, pa))
        ycur = st[y]
        if ycur[_OCC] == to_occ:
            raise ValueError(f"event log is inconsistent: flip at {y} does "
                             "not change the site")
        dr = 1 if to_occ else -1
        for x, rec, pa in touched:
            rec[_REF] += dr
            if pa != 0.0:
                rec[_F1] += pa if to_occ else -pa
        ycur[_OCC] = to_occ
        if self.entries:
            for x, rec, _ in touched:
                self._table_sums(x, rec)
        for x, rec, _ in touched:
            if rec[_REF] == 0:
                del st[x]
            else:
                self._acc(x, rec, 1.0)
        self.flips += 1
        if self.flips % _REFRESH_FLIPS == 0:
            self.refresh()

    def refresh(self):
        """Recompute f1 and table weights from occupancy, then the sums."""
        st = self.state
        for x, rec in st.items():
            f1 = 0.0
            for e, p in self.kern:
                nb = st.get(tuple(xi + ei for xi, ei in zip(x, e)))
                if nb is not None and nb[_OCC]:
                    f1 += p
            rec[_F1] = f1
            if self.entries:
                self._table_sums(x, rec)
        self.sums = _Sums()
        for x, rec in st.items():
            self._acc(x, rec, 1.0)

    # -- integrand evaluation --

    def x_at(self, w):
        p1 = self.sums.p1
        return (p1[0] + w * (p1[1] - p1[0])) / self.N

    def integrands(self, w):
        """(x_phi, xdot, d1, d2, d3, qv1, qv2, comp, qv_main, qv_rem) at
        blend weight w; each is exact for the frozen configuration."""
        S = self.sums
        N = self.N

        def lin(v):
            return v[0] + w * (v[1] - v[0])

        def quad(v):
            return v[0] + w * (2.0 * (v[1] - v[0])) \
                + w * w * (v[0] - 2.0 * v[1] + v[2])

        p1 = lin(S.p1)
        x_phi = p1 / N
        xdot = 0.0
        if self.seg_len > 0.0 and self.fb is not self.fa:
            xdot = (S.p1[1] - S.p1[0]) / (N * self.seg_len)
        i_d1 = lin(S.p2) / N + xdot
        h = quad(S.h)
        zo = quad(S.zo)
        z = quad(S.z)
        i_qv1 = (z + h - 2.0 * zo) / N
        i_main = 2.0 * (h - zo) / N
        i_rem = (z - h) / N
        if self.mode == "lv":
            t0 = self.theta0
            t1 = self.theta1
            q_all = lin(S.q)
            q_occ = lin(S.qo)
            w_occ = lin(S.w)
            r_occ = p1 - 2.0 * w_occ + q_occ           # occupied phi f0^2
            i_d2 = t0 * q_all / N
            i_d3 = (t0 * q_occ + t1 * r_occ) / N
            z2 = quad(S.z2)
            z2o = quad(S.z2o)
            occ_f0sq = h - 2.0 * zo + z2o              # occupied phi^2 f0^2
            i_qv2 = (t0 * (z2 - z2o) + t1 * occ_f0sq) / (N * N)
            pert_birth = t0 * (q_all - q_occ)
            pert_death = t1 * r_occ
        elif self.mode == "table":
            de = self.delta_empty
            g2 = lin(S.g2)
            g2o = lin(S.g2o)
            g3 = lin(S.g3d)
            i_d2 = g2 / N
            i_d3 = (g2o + g3 + de * p1) / N
            k2 = quad(S.k2)
            k2o = quad(S.k2o)
            k3 = quad(S.k3d)
            i_qv2 = ((k2 - k2o) + k3 + de * h) / (N * N)
            pert_birth = g2 - g2o
            pert_death = g3 + de * p1
        else:
            i_d2 = i_d3 = i_qv2 = 0.0
            pert_birth = pert_death = 0.0
        i_comp = (lin(S.u) - p1) + (pert_birth - pert_death) / N
        return (x_phi, xdot, i_d1, i_d2, i_d3, i_qv1, i_qv2, i_comp,
                i_main, i_rem)


@dataclass(frozen=True)
class DecompositionReport:
    """Cumulative decomposition ledger sampled on a time grid.

    All integral columns are cumulative from time zero.  ``martingale``
    is the identity remainder X_t(phi_t) - X_0(phi_0) - drift;
    ``residual`` is that remainder minus the independently accumulated
    jump-sum-minus-compensator, gated at 1e-9 relative to ``scale``.
    ``qv_main`` and ``qv_rem`` split qv1 into twice the occupied
    phi^2 f0 integral and the vacant/occupied remainder.
    """

    t: np.ndarray
    x_phi: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    martingale: np.ndarray
    qv1: np.ndarray
    qv2: np.ndarray
    residual: np.ndarray
    qv_main: np.ndarray
    qv_rem: np.ndarray
    x0: float
    scale: float
    n_events: int

    @property
    def drift(self):
        return self.d1 + self.d2 - self.d3

    @property
    def qv_total(self):
        return self.qv1 + self.qv2

    @property
    def max_rel_residual(self):
        if len(self.residual) == 0:
            return 0.0
        return float(np.max(np.abs(self.residual))) / self.scale

    def to_csv(self, path):
        cols = (self.t, self.x_phi, self.d1, self.d2, self.d3,
                self.martingale, self.qv1, self.qv2, self.residual)
        with open(path, "w") as fh:
            fh.write("t,X_phi,D1,D2,D3,M,QV1,QV2,residual\n")
            for row in zip(*cols):
                fh.write(",".join("%.17g" % v for v in row) + "\n")


def decompose(result, kernel, model, phi, *, N, scaling=None, grid=None):
    """Replay a recorded run and audit the drift/martingale split.

    ``result`` must come from ``simulate(..., record_log=True)``;
    ``model`` names the perturbation exactly as passed to ``simulate``.
    Every time integral is computed in closed form between flips (the
    integrands are polynomials in time of degree at most two there), so
    the only slack in the residual column is float accumulation.
    """
    events = _event_list(result)
    d = result.d
    if kernel.d != d:
        raise ValueError(f"kernel is {kernel.d}-dimensional, run is {d}")
    wmap = _symmetric_weights(kernel)
    mode, theta0, theta1, table = _pert_mode(model, kernel, d)
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    sc = scaling if scaling is not None else ScalingParams(N, kernel)
    t_end = float(result.time)
    if grid is None:
        grid = np.linspace(0.0, t_end, 11) if t_end > 0.0 else np.zeros(1)
    grid = np.sort(np.asarray(grid, dtype=float))
    if len(grid) and (grid[0] < 0.0 or grid[-1] > t_end):
        raise ValueError("grid times must lie in [0, run time]")

    init = _initial_sites(result, events)
    segs = phi.segments(t_end)
    if not segs:
        segs = [(0.0, t_end, phi.at_time(0.0), phi.at_time(t_end))]
    rp = _Replay(mode, theta0, theta1, table, wmap, N, sc.ell)
    si = 0
    rp.set_segment(*segs[0])
    for s in init:
        rp.flip(s, True)
    rp.flips = 0
    x0 = rp.x_at(0.0)

    # cumulative integrals, indexed like integrands()[1:]
    tot = np.zeros(9)
    jump_sum = 0.0
    rows = []
    state = {"cur": 0.0, "si": 0, "gi": 0}

    def span(a, b):
        if b <= a:
            return
        w0 = rp.w_at(a)
        w1 = rp.w_at(b)
        v0 = rp.integrands(w0)
        vm = rp.integrands(0.5 * (w0 + w1))
        v1 = rp.integrands(w1)
        c = (b - a) / 6.0
        for k in range(9):
            tot[k] += c * (v0[k + 1] + 4.0 * vm[k + 1] + v1[k + 1])

    def emit(t_row):
        x = rp.x_at(rp.w_at(t_row))
        # jumps minus their compensator; phi-dot enters through D1 only
        m_ind = jump_sum - tot[6]
        drift = tot[1] + tot[2] - tot[3]
        m = x - x0 - drift
        rows.append((t_row, x, tot[1], tot[2], tot[3], m, tot[4], tot[5],
                     m - m_ind, tot[7], tot[8]))

    def advance(target, inclusive):
        cur = state["cur"]
        gi = state["gi"]
        while True:
            si = state["si"]
            while si + 1 < len(segs) and cur >= segs[si][1]:
                si += 1
                state["si"] = si
                rp.set_segment(*segs[si])
            step_to = min(target, segs[si][1]) if si + 1 < len(segs) \
                else target
            while gi < len(grid) and grid[gi] <= step_to \
                    and (grid[gi] < target or inclusive):
                g = grid[gi]
                if g >= cur:
                    span(cur, g)
                    cur = g
                    emit(g)
                gi += 1
            span(cur, step_to)
            cur = step_to
            state["cur"] = cur
            state["gi"] = gi
            if cur >= target:
                return

    for te, y, val in events:
        advance(te, inclusive=False)
        w = rp.w_at(te)
        va, vb = rp._phi(y)
        ph = va + w * (vb - va)
        jump_sum += ph / rp.N if val else -ph / rp.N
        rp.flip(y, val)
        gi = state["gi"]
        while gi < len(grid) and grid[gi] == te:
            emit(te)
            gi += 1
        state["gi"] = gi
    advance(t_end, inclusive=True)

    arr = np.array(rows, dtype=float).reshape(len(rows), 11)
    scale = max(
        1.0 / N, abs(x0),
        float(np.max(np.abs(arr[:, 1:8]))) if len(rows) else 0.0,
    )
    return DecompositionReport(
        t=arr[:, 0], x_phi=arr[:, 1], d1=arr[:, 2], d2=arr[:, 3],
        d3=arr[:, 4], martingale=arr[:, 5], qv1=arr[:, 6], qv2=arr[:, 7],
        residual=arr[:, 8], qv_main=arr[:, 9], qv_rem=arr[:, 10],
        x0=x0, scale=scale, n_events=len(events),
    )


# -- perturbation statistic --------------------------------------------------


def perturbation_statistic(result, kernel, A, phi, sigma_NA, *, N,
                           scaling=None, t_end=None):
    """Exact time integral of the centered local-pattern statistic.

    The integrand is (1/N) sum_x phi_s(x) chi(A, x, xi_s) minus
    sigma_NA X_s(phi_s); the empty pattern integrates to zero exactly by
    the sigma(empty) = 1 convention.  Squaring and averaging across
    replicas estimates the vanishing-perturbation error term.
    """
    offs = sorted({tuple(int(c) for c in a) for a in A})
    d = result.d
    for a in offs:
        if len(a) != d:
            raise ValueError(f"offset {a} is not {d}-dimensional")
    if not offs:
        return 0.0
    events = _event_list(result)
    N = int(N)
    sc = scaling if scaling is not None else ScalingParams(N, kernel)
    ell = float(sc.ell)
    te_max = float(result.time) if t_end is None else float(t_end)
    if not 0.0 <= te_max <= float(result.time):
        raise ValueError("t_end must lie in [0, run time]")
    sigma = float(sigma_NA)

    occ = set(_initial_sites(result, events))
    segs = phi.segments(te_max)
    if not segs:
        segs = [(0.0, te_max, phi.at_time(0.0), phi.at_time(te_max))]
    box = {"fa": None, "fb": None, "pc": None, "sa": None, "sb": 0.0,
           "slen": 0.0, "SA": [0.0, 0.0], "P1": [0.0, 0.0]}

    def phi_at(x):
        c = box["pc"].get(x)
        if c is None:
            pos = np.array(x, dtype=float)
            pos /= ell
            va = float(box["fa"].value(pos))
            vb = va if box["fb"] is box["fa"] else float(box["fb"].value(pos))
            c = (va, vb)
            box["pc"][x] = c
        return c

    def chi(x):
        for a in offs:
            if tuple(xi + ai for xi, ai in zip(x, a)) not in occ:
                return False
        return True

    def rebuild(seg):
        ta, tb, fa, fb = seg
        box.update(fa=fa, fb=fb, pc={}, sa=ta, sb=tb, slen=tb - ta)
        P1 = [0.0, 0.0]
        SA = [0.0, 0.0]
        for s in occ:
            va, vb = phi_at(s)
            P1[0] += va
            P1[1] += vb
        a0 = offs[0]
        seen = set()
        for s in occ:
            x = tuple(si - ai for si, ai in zip(s, a0))
            if x in seen:
                continue
            seen.add(x)
            if chi(x):
                va, vb = phi_at(x)
                SA[0] += va
                SA[1] += vb
        box["P1"] = P1
        box["SA"] = SA

    integral = 0.0

    def span(a, b):
        nonlocal integral
        if b <= a:
            return
        slen = box["slen"]
        sa = box["sa"]
        P1 = box["P1"]
        SA = box["SA"]

        def delta_at(t):
            w = (t - sa) / slen if slen > 0.0 else 0.0
            p1 = P1[0] + w * (P1[1] - P1[0])
            s = SA[0] + w * (SA[1] - SA[0])
            return s / N - sigma * p1 / N

        integral += 0.5 * (b - a) * (delta_at(a) + delta_at(b))

    si = 0
    rebuild(segs[0])
    cur = 0.0
    for te, y, val in events:
        if te > te_max:
            break
        while si + 1 < len(segs) and te > segs[si][1]:
            span(cur, segs[si][1])
            cur = segs[si][1]
            si += 1
            rebuild(segs[si])
        span(cur, te)
        cur = te
        if (y in occ) == val:
            raise ValueError(f"event log is inconsistent: flip at {y} does "
                             "not change the site")
        affected = {tuple(yi - ai for yi, ai in zip(y, a)) for a in offs}
        before = {x: chi(x) for x in affected}
        va, vb = phi_at(y)
        P1 = box["P1"]
        SA = box["SA"]
        if val:
            occ.add(y)
            P1[0] += va
            P1[1] += vb
        else:
            occ.remove(y)
            P1[0] -= va
            P1[1] -= vb
        for x in affected:
            after = chi(x)
            if after != before[x]:
                xa, xb = phi_at(x)
                s = 1.0 if after else -1.0
                SA[0] += s * xa
                SA[1] += s * xb
    while si + 1 < len(segs) and te_max > segs[si][1]:
        span(cur, segs[si][1])
        cur = segs[si][1]
        si += 1
        rebuild(segs[si])
    span(cur, te_max)
    return integral


# -- generator gap -----------------------------------------------------------


def generator_gap(kernel, N, phi, sites, *, scaling=None, t=0.0):
    """sup over sample sites of |rescaled generator - sigma^2/2 laplacian|.

    The generator applies the kernel on the lattice at speed N and reads
    the field at site/ell; the comparison point is the diffusion limit.
    """
    fn = phi.at_time(t)
    N = int(N)
    sc = scaling if scaling is not None else ScalingParams(N, kernel)
    if hasattr(sites, "as_array"):
        arr = sites.as_array()
    else:
        arr = np.asarray(list(sites) if not isinstance(sites, np.ndarray)
                         else sites)
    arr = np.asarray(arr, dtype=float)
    if arr.size == 0:
        return 0.0
    arr = arr.reshape(len(arr), kernel.d)
    base = arr / sc.ell
    base_vals = np.asarray(fn.value(base), dtype=float)
    gen = np.zeros(len(arr))
    for off, p in zip(kernel.offsets, kernel.probs):
        shifted = (arr + np.asarray(off, dtype=float)) / sc.ell
        gen += p * (np.asarray(fn.value(shifted), dtype=float) - base_vals)
    gap = np.abs(N * gen - 0.5 * kernel.sigma2
                 * np.asarray(fn.laplacian(base), dtype=float))
    return float(np.max(gap))
