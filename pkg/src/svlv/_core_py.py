"""Pure-Python twin of the compiled simulation core.

Every routine here has a line-for-line counterpart in ``_core.pyx``.  The
two backends draw the same sequence of raw uniforms from the same bit
generator and perform the same floating-point operations in the same
order, so a given seed produces byte-identical paths on either.  Keep the
twins in sync: any change to draw order, iteration order, or arithmetic
grouping here must be mirrored there.

Draw discipline: the only randomness source is ``rng.random()`` (one
``next_double`` per call).  Exponential waiting times use inversion,
``-log1p(-u) / total_rate``.

Coordinates are unscaled lattice integers bounded by ``COORD_GUARD`` so
the compiled backend can pack a site into one int64.
"""

from math import log1p

import numpy as np

from ._errors import BudgetError, DominationError, EngineError, PositivityError

COORD_GUARD = (1 << 20) - 64

KIND_VOTER = 0
KIND_LV = 1
KIND_BIASED = 2
KIND_TABLE = 3

REFRESH_EVERY = 65536

BACKEND_NAME = "python"


def _cum_search(cum, u):
    """First index i with u < cum[i]; cum[-1] == 1.0 and u in [0,1)."""
    lo = 0
    hi = len(cum) - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if u < cum[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


class SumTree:
    """Complete binary tree of slot rates; parents are exact child sums."""

    __slots__ = ("cap", "tree")

    def __init__(self, cap):
        c = 1
        while c < cap:
            c <<= 1
        self.cap = c
        self.tree = [0.0] * (2 * c)

    def set(self, slot, value):
        t = self.tree
        i = self.cap + slot
        t[i] = value
        i >>= 1
        while i:
            t[i] = t[2 * i] + t[2 * i + 1]
            i >>= 1

    def total(self):
        return self.tree[1]

    def select(self, u):
        """Descend to the leaf containing u * total in cumulative slot order."""
        t = self.tree
        target = u * t[1]
        i = 1
        while i < self.cap:
            left = i + i
            if target < t[left]:
                i = left
            else:
                target -= t[left]
                i = left + 1
        return i - self.cap

    def grow(self):
        old = self.tree
        oc = self.cap
        nc = oc * 2
        nt = [0.0] * (2 * nc)
        nt[nc:nc + oc] = old[oc:2 * oc]
        for i in range(nc - 1, 0, -1):
            nt[i] = nt[2 * i] + nt[2 * i + 1]
        self.cap = nc
        self.tree = nt


def _check_coord(site):
    for c in site:
        if c >= COORD_GUARD or c <= -COORD_GUARD:
            raise EngineError(f"site {site} leaves the supported coordinate range")


class _Tally:
    """Exact inter-event integrals of the tracked state sums."""

    __slots__ = ("mass", "f0", "vf1", "d2num", "d3num", "qv2num")

    def __init__(self):
        self.mass = 0.0
        self.f0 = 0.0
        self.vf1 = 0.0
        self.d2num = 0.0
        self.d3num = 0.0
        self.qv2num = 0.0


class DirectEngine:
    """Sparse rate-cache engine: one cached rate per active site.

    A site is active while some occupied site lies in its dependence
    neighbourhood (itself, kernel support, or a table key offset); the
    activation offsets arrive precomputed in ``pack.act_offs``.  Local
    occupied-neighbour densities are maintained incrementally, so slot
    activation never needs a support scan: a site entering the active set
    has exactly one occupied neighbour, the one that woke it.
    """

    def __init__(self, pack, init_sites, track_qv=False, record_log=False,
                 selection="tree"):
        self.pack = pack
        self.track_qv = bool(track_qv)
        self.record_log = bool(record_log)
        self.lex = selection == "lex"
        self.site_slot = {}
        self.slot_site = []
        self.ref = []
        self.occ = []
        self.f1 = []
        self.fb1 = []
        self.pb = []
        self.pd = []
        self.rate = []
        self.free = []
        self.tree = SumTree(256)
        self.n_occ = 0
        self.time = 0.0
        self.events = 0
        self.steps = 0
        self.absorbed = False
        self.s_f0 = 0.0
        self.s_f0sq = 0.0
        self.s_vf1 = 0.0
        self.s_vf1sq = 0.0
        self.s_pb_vac = 0.0
        self.s_pb_occ = 0.0
        self.s_pd_occ = 0.0
        self.tally = _Tally()
        self.log_t = []
        self.log_site = []
        self.log_val = []
        self._act = [tuple(int(c) for c in row) for row in pack.act_offs]
        self._act_p = [float(v) for v in pack.act_p]
        self._act_p2 = [float(v) for v in pack.act_p2]
        self._origin_k = self._act.index((0,) * pack.d)
        self._entries = pack.table_entries
        for site in init_sites:
            self.flip(tuple(int(c) for c in site), True)

    # -- slot bookkeeping ------------------------------------------------

    def _alloc(self, site):
        if self.free:
            slot = self.free.pop()
            self.slot_site[slot] = site
            self.ref[slot] = 0
            self.occ[slot] = False
            self.f1[slot] = 0.0
            self.fb1[slot] = 0.0
            self.pb[slot] = 0.0
            self.pd[slot] = 0.0
            self.rate[slot] = 0.0
        else:
            slot = len(self.slot_site)
            self.slot_site.append(site)
            self.ref.append(0)
            self.occ.append(False)
            self.f1.append(0.0)
            self.fb1.append(0.0)
            self.pb.append(0.0)
            self.pd.append(0.0)
            self.rate.append(0.0)
            if slot >= self.tree.cap:
                self.tree.grow()
        self.site_slot[site] = slot
        return slot

    def _qv_remove(self, slot):
        if not self.track_qv or self.ref[slot] == 0:
            return
        f1 = self.f1[slot]
        if self.occ[slot]:
            f0 = 1.0 - f1
            self.s_f0 -= f0
            self.s_f0sq -= f0 * f0
            if self.pack.kind == KIND_TABLE:
                self.s_pb_occ -= self.pb[slot]
                self.s_pd_occ -= self.pd[slot]
        else:
            self.s_vf1 -= f1
            self.s_vf1sq -= f1 * f1
            if self.pack.kind == KIND_TABLE:
                self.s_pb_vac -= self.pb[slot]

    def _qv_add(self, slot):
        if not self.track_qv or self.ref[slot] == 0:
            return
        f1 = self.f1[slot]
        if self.occ[slot]:
            f0 = 1.0 - f1
            self.s_f0 += f0
            self.s_f0sq += f0 * f0
            if self.pack.kind == KIND_TABLE:
                self.s_pb_occ += self.pb[slot]
                self.s_pd_occ += self.pd[slot]
        else:
            self.s_vf1 += f1
            self.s_vf1sq += f1 * f1
            if self.pack.kind == KIND_TABLE:
                self.s_pb_vac += self.pb[slot]

    def _table_weights(self, site):
        """(birth, death) table weights at site by scanning all entries."""
        b_tot = 0.0
        d_tot = 0.0
        lookup = self.site_slot
        occ = self.occ
        for key, beta, delta in self._entries:
            hit = True
            for off in key:
                s2 = lookup.get(tuple(a + b for a, b in zip(site, off)))
                if s2 is None or not occ[s2]:
                    hit = False
                    break
            if hit:
                b_tot += beta
                d_tot += delta
        return b_tot, d_tot

    def _compute_rate(self, slot):
        pack = self.pack
        site = self.slot_site[slot]
        if pack.has_domain:
            for c, lo, hi in zip(site, pack.dom_lo, pack.dom_hi):
                if c < lo or c > hi:
                    return 0.0
        f1 = self.f1[slot]
        if self.occ[slot]:
            f0 = 1.0 - f1
            if pack.kind == KIND_LV:
                r = f0 * (pack.N + pack.theta1 * f0)
            elif pack.kind == KIND_TABLE:
                r = pack.N * f0 + self.pd[slot] + pack.delta_empty
            else:
                r = pack.N * f0
        else:
            if pack.kind == KIND_LV:
                r = f1 * (pack.N + pack.theta0 * f1)
            elif pack.kind == KIND_TABLE:
                r = pack.N * f1 + self.pb[slot]
            elif pack.kind == KIND_BIASED:
                r = pack.N * f1 + pack.bias * self.fb1[slot]
            else:
                r = pack.N * f1
        if r < 0.0:
            if r < -pack.neg_tol:
                raise PositivityError(
                    f"negative flip rate {r!r} at site {site} (t={self.time!r})"
                )
            r = 0.0
        return r

    def flip(self, y, to_occ):
        """Toggle y and update every dependent slot; exact mirror of _core."""
        _check_coord(y)
        dr = 1 if to_occ else -1
        act = self._act
        act_p = self._act_p
        act_p2 = self._act_p2
        origin_k = self._origin_k
        touched = []
        for k in range(len(act)):
            dep = act[k]
            x = tuple(a - b for a, b in zip(y, dep))
            slot = self.site_slot.get(x)
            if slot is None:
                slot = self._alloc(x)
            self._qv_remove(slot)
            self.ref[slot] += dr
            pk = act_p[k]
            if pk != 0.0:
                self.f1[slot] += dr * pk
            p2k = act_p2[k]
            if p2k != 0.0:
                self.fb1[slot] += dr * p2k
            if k == origin_k:
                self.occ[slot] = to_occ
                self.n_occ += dr
            touched.append(slot)
        table = self.pack.kind == KIND_TABLE
        for slot in touched:
            if self.ref[slot] == 0:
                site = self.slot_site[slot]
                del self.site_slot[site]
                self.rate[slot] = 0.0
                self.tree.set(slot, 0.0)
                self.free.append(slot)
                continue
            if table:
                self.pb[slot], self.pd[slot] = self._table_weights(self.slot_site[slot])
            r = self._compute_rate(slot)
            self.rate[slot] = r
            self._qv_add(slot)
            self.tree.set(slot, r)

    def refresh(self):
        """Recompute densities, rates and sums from scratch (drift control)."""
        pack = self.pack
        koffs = [tuple(int(c) for c in row) for row in pack.k_offsets]
        kprobs = [float(v) for v in pack.k_probs]
        k2offs = [tuple(int(c) for c in row) for row in pack.k2_offsets]
        k2probs = [float(v) for v in pack.k2_probs]
        self.s_f0 = self.s_f0sq = self.s_vf1 = self.s_vf1sq = 0.0
        self.s_pb_vac = self.s_pb_occ = self.s_pd_occ = 0.0
        for slot in range(len(self.slot_site)):
            if self.ref[slot] == 0:
                continue
            site = self.slot_site[slot]
            f1 = 0.0
            for off, p in zip(koffs, kprobs):
                s2 = self.site_slot.get(tuple(a + b for a, b in zip(site, off)))
                if s2 is not None and self.occ[s2]:
                    f1 += p
            self.f1[slot] = f1
            if pack.kind == KIND_BIASED:
                fb1 = 0.0
                for off, p in zip(k2offs, k2probs):
                    s2 = self.site_slot.get(tuple(a + b for a, b in zip(site, off)))
                    if s2 is not None and self.occ[s2]:
                        fb1 += p
                self.fb1[slot] = fb1
            if pack.kind == KIND_TABLE:
                self.pb[slot], self.pd[slot] = self._table_weights(site)
            r = self._compute_rate(slot)
            self.rate[slot] = r
            self.tree.set(slot, r)
            self._qv_add(slot)

    def _select_lex(self, u):
        total = self.tree.total()
        items = []
        for slot in range(len(self.slot_site)):
            if self.ref[slot] != 0 and self.rate[slot] > 0.0:
                items.append((self.slot_site[slot], slot))
        items.sort()
        target = u * total
        acc = 0.0
        for _, slot in items:
            acc += self.rate[slot]
            if target < acc:
                return slot
        return items[-1][1]

    def _select(self, u):
        if self.lex:
            return self._select_lex(u)
        slot = self.tree.select(u)
        if self.rate[slot] <= 0.0 or self.ref[slot] == 0:
            # FP boundary landing on a dead slot: deterministic rescan.
            for s in range(len(self.slot_site)):
                if self.ref[s] != 0 and self.rate[s] > 0.0:
                    return s
        return slot

    def _integrate(self, dt):
        t = self.tally
        t.mass += self.n_occ * dt
        if not self.track_qv:
            return
        pack = self.pack
        if pack.kind == KIND_LV:
            pbv = pack.theta0 * self.s_vf1sq
            pbo = pack.theta0 * (self.n_occ - 2.0 * self.s_f0 + self.s_f0sq)
            pdo = pack.theta1 * self.s_f0sq
        elif pack.kind == KIND_TABLE:
            pbv = self.s_pb_vac
            pbo = self.s_pb_occ
            pdo = self.s_pd_occ + pack.delta_empty * self.n_occ
        else:
            pbv = pbo = pdo = 0.0
        t.f0 += self.s_f0 * dt
        t.vf1 += self.s_vf1 * dt
        # d2num sums the birth table over all sites; pairing with the
        # (birth + death over occupied) d3num reproduces the drift.
        t.d2num += (pbv + pbo) * dt
        t.d3num += (pbo + pdo) * dt
        t.qv2num += (pbv + pdo) * dt

    def drive(self, rng, t_end, grid, max_steps):
        """Advance to t_end, recording mass at grid times. Returns result dict."""
        grid = list(grid)
        gi = 0
        mass_grid = [0] * len(grid)
        while gi < len(grid) and grid[gi] <= self.time:
            mass_grid[gi] = self.n_occ
            gi += 1
        while True:
            total = self.tree.total()
            if total <= 0.0:
                self.absorbed = True
                break
            u1 = rng.random()
            dt = -log1p(-u1) / total
            t_new = self.time + dt
            if t_new > t_end:
                break
            if self.steps >= max_steps:
                raise BudgetError(f"event budget {max_steps} exceeded at t={self.time!r}")
            while gi < len(grid) and grid[gi] <= t_new:
                mass_grid[gi] = self.n_occ
                gi += 1
            self._integrate(dt)
            self.time = t_new
            u2 = rng.random()
            slot = self._select(u2)
            y = self.slot_site[slot]
            to_occ = not self.occ[slot]
            if self.record_log:
                self.log_t.append(self.time)
                self.log_site.append(y)
                self.log_val.append(1 if to_occ else 0)
            self.flip(y, to_occ)
            self.steps += 1
            self.events += 1
            if self.steps % REFRESH_EVERY == 0:
                self.refresh()
        while gi < len(grid):
            mass_grid[gi] = self.n_occ
            gi += 1
        self._integrate(t_end - self.time)
        self.time = t_end
        return self.result(mass_grid)

    def step_once(self, rng, t_max):
        """One event (or absorption/horizon), for the stepping facade."""
        total = self.tree.total()
        if total <= 0.0:
            self.absorbed = True
            return None
        u1 = rng.random()
        dt = -log1p(-u1) / total
        t_new = self.time + dt
        if t_new > t_max:
            self._integrate(t_max - self.time)
            self.time = t_max
            return None
        self._integrate(dt)
        self.time = t_new
        u2 = rng.random()
        slot = self._select(u2)
        y = self.slot_site[slot]
        to_occ = not self.occ[slot]
        self.flip(y, to_occ)
        self.steps += 1
        self.events += 1
        if self.steps % REFRESH_EVERY == 0:
            self.refresh()
        return (self.time, y, 1 if to_occ else 0)

    def occupied_sites(self):
        out = [self.slot_site[s] for s in range(len(self.slot_site))
               if self.ref[s] != 0 and self.occ[s]]
        out.sort()
        return out

    def result(self, mass_grid):
        occ = self.occupied_sites()
        d = self.pack.d
        t = self.tally
        return {
            "time": self.time,
            "events": self.events,
            "steps": self.steps,
            "absorbed": self.absorbed,
            "n_occ": self.n_occ,
            "final_sites": np.array(occ, dtype=np.int64).reshape(len(occ), d),
            "mass_grid": np.array(mass_grid, dtype=np.int64),
            "int_mass": t.mass,
            "int_f0": t.f0,
            "int_vf1": t.vf1,
            "int_d2num": t.d2num,
            "int_d3num": t.d3num,
            "int_qv2num": t.qv2num,
            "log_t": np.array(self.log_t, dtype=float),
            "log_site": np.array(self.log_site, dtype=np.int64).reshape(len(self.log_site), d),
            "log_val": np.array(self.log_val, dtype=np.int8),
        }


def run_direct(pack, init_sites, rng, t_end, grid, max_steps,
               track_qv=False, record_log=False, selection="tree"):
    eng = DirectEngine(pack, init_sites, track_qv, record_log, selection)
    return eng.drive(rng, t_end, grid, max_steps)


class _QvMap:
    """Occupied-neighbour densities for the thinning engine's exact integrals."""

    __slots__ = ("deps", "dep_p", "rec", "s_f0", "s_f0sq", "s_vf1", "s_vf1sq")

    def __init__(self, pack):
        self.deps = [tuple(int(c) for c in row) for row in pack.act_offs]
        self.dep_p = [float(v) for v in pack.act_p]
        self.rec = {}
        self.s_f0 = 0.0
        self.s_f0sq = 0.0
        self.s_vf1 = 0.0
        self.s_vf1sq = 0.0

    def _remove(self, r):
        if r[0] == 0:
            return
        if r[2]:
            f0 = 1.0 - r[1]
            self.s_f0 -= f0
            self.s_f0sq -= f0 * f0
        else:
            self.s_vf1 -= r[1]
            self.s_vf1sq -= r[1] * r[1]

    def _add(self, r):
        if r[0] == 0:
            return
        if r[2]:
            f0 = 1.0 - r[1]
            self.s_f0 += f0
            self.s_f0sq += f0 * f0
        else:
            self.s_vf1 += r[1]
            self.s_vf1sq += r[1] * r[1]

    def flip(self, y, to_occ):
        dr = 1 if to_occ else -1
        origin = (0,) * len(y)
        for dep, pk in zip(self.deps, self.dep_p):
            x = tuple(a - b for a, b in zip(y, dep))
            r = self.rec.get(x)
            if r is None:
                r = [0, 0.0, False]
                self.rec[x] = r
            self._remove(r)
            r[0] += dr
            if pk != 0.0:
                r[1] += dr * pk
            if dep == origin:
                r[2] = to_occ
            if r[0] == 0:
                del self.rec[x]
            else:
                self._add(r)


class ThinningEngine:
    """Proposal engine for wide kernels: O(1) work per proposal.

    Each occupied site proposes voter births and deaths at rate N onto a
    kernel-sampled target, accepted iff the relevant site is vacant; the
    competition terms ride on the same proposals through a second
    kernel-sampled occupancy test, realizing birth rate f1*(N+theta0*f1)
    and death rate f0*(N+theta1*f1... f0) exactly without support scans.
    """

    def __init__(self, pack, init_sites, track_qv=False, record_log=False):
        if pack.kind not in (KIND_VOTER, KIND_LV):
            raise EngineError("thinning engine supports voter and competition runs")
        self.pack = pack
        self.track_qv = bool(track_qv)
        self.record_log = bool(record_log)
        self.occupied = []
        self.index = {}
        self.time = 0.0
        self.events = 0
        self.steps = 0
        self.absorbed = False
        self.tally = _Tally()
        self.qv = _QvMap(pack) if track_qv else None
        self.log_t = []
        self.log_site = []
        self.log_val = []
        self._cum = [float(v) for v in pack.k_cum]
        self._offs = [tuple(int(c) for c in row) for row in pack.k_offsets]
        t0 = pack.theta0
        t1 = pack.theta1
        self.t0 = t0
        self.t1 = t1
        self.birth_dom = pack.N + (t0 if t0 > 0.0 else 0.0)
        self.death_dom = pack.N + (t1 if t1 > 0.0 else 0.0)
        self.per_occ = self.birth_dom + self.death_dom
        if pack.N + t0 < 0.0 or pack.N + t1 < 0.0:
            raise PositivityError("competition strength exceeds the voter speed")
        for site in sorted(tuple(int(c) for c in s) for s in init_sites):
            self._set(site, True)

    def _set(self, site, to_occ):
        if to_occ:
            self.index[site] = len(self.occupied)
            self.occupied.append(site)
        else:
            idx = self.index.pop(site)
            last = self.occupied.pop()
            if last != site:
                self.occupied[idx] = last
                self.index[last] = idx
        if self.qv is not None:
            self.qv.flip(site, to_occ)

    def _in_domain(self, site):
        pack = self.pack
        if not pack.has_domain:
            return True
        for c, lo, hi in zip(site, pack.dom_lo, pack.dom_hi):
            if c < lo or c > hi:
                return False
        return True

    def _integrate(self, dt):
        t = self.tally
        n = len(self.occupied)
        t.mass += n * dt
        if self.qv is None:
            return
        q = self.qv
        pbv = self.t0 * q.s_vf1sq
        pbo = self.t0 * (n - 2.0 * q.s_f0 + q.s_f0sq)
        pdo = self.t1 * q.s_f0sq
        t.f0 += q.s_f0 * dt
        t.vf1 += q.s_vf1 * dt
        t.d2num += (pbv + pbo) * dt
        t.d3num += (pbo + pdo) * dt
        t.qv2num += (pbv + pdo) * dt

    def drive(self, rng, t_end, grid, max_steps):
        pack = self.pack
        grid = list(grid)
        gi = 0
        mass_grid = [0] * len(grid)
        while gi < len(grid) and grid[gi] <= self.time:
            mass_grid[gi] = len(self.occupied)
            gi += 1
        cum = self._cum
        offs = self._offs
        t0 = self.t0
        t1 = self.t1
        N = pack.N
        while True:
            n = len(self.occupied)
            if n == 0:
                self.absorbed = True
                break
            total = self.per_occ * n
            u1 = rng.random()
            dt = -log1p(-u1) / total
            t_new = self.time + dt
            if t_new > t_end:
                break
            if self.steps >= max_steps:
                raise BudgetError(f"event budget {max_steps} exceeded at t={self.time!r}")
            while gi < len(grid) and grid[gi] <= t_new:
                mass_grid[gi] = n
                gi += 1
            self._integrate(dt)
            self.time = t_new
            self.steps += 1
            zi = int(rng.random() * n)
            if zi == n:
                zi = n - 1
            z = self.occupied[zi]
            birth = rng.random() * self.per_occ < self.birth_dom
            ki = _cum_search(cum, rng.random())
            e = offs[ki]
            flip_site = None
            flip_val = 0
            if birth:
                x = tuple(a + b for a, b in zip(z, e))
                _check_coord(x)
                if x not in self.index and self._in_domain(x):
                    u5 = rng.random()
                    if t0 >= 0.0:
                        if u5 * (N + t0) < N:
                            flip_site, flip_val = x, 1
                        else:
                            e2 = offs[_cum_search(cum, rng.random())]
                            x2 = tuple(a + b for a, b in zip(x, e2))
                            if x2 in self.index:
                                flip_site, flip_val = x, 1
                    else:
                        if u5 * N < N + t0:
                            flip_site, flip_val = x, 1
                        else:
                            e2 = offs[_cum_search(cum, rng.random())]
                            x2 = tuple(a + b for a, b in zip(x, e2))
                            if x2 not in self.index:
                                flip_site, flip_val = x, 1
            else:
                x = tuple(a + b for a, b in zip(z, e))
                _check_coord(x)
                if x not in self.index:
                    u5 = rng.random()
                    if t1 >= 0.0:
                        if u5 * (N + t1) < N:
                            flip_site, flip_val = z, 0
                        else:
                            e2 = offs[_cum_search(cum, rng.random())]
                            x2 = tuple(a + b for a, b in zip(z, e2))
                            if x2 not in self.index:
                                flip_site, flip_val = z, 0
                    else:
                        if u5 * N < N + t1:
                            flip_site, flip_val = z, 0
                        else:
                            e2 = offs[_cum_search(cum, rng.random())]
                            x2 = tuple(a + b for a, b in zip(z, e2))
                            if x2 in self.index:
                                flip_site, flip_val = z, 0
            if flip_site is not None:
                if self.record_log:
                    self.log_t.append(self.time)
                    self.log_site.append(flip_site)
                    self.log_val.append(flip_val)
                self._set(flip_site, flip_val == 1)
                self.events += 1
        while gi < len(grid):
            mass_grid[gi] = len(self.occupied)
            gi += 1
        self._integrate(t_end - self.time)
        self.time = t_end
        return self.result(mass_grid)

    def result(self, mass_grid):
        occ = sorted(self.occupied)
        d = self.pack.d
        t = self.tally
        return {
            "time": self.time,
            "events": self.events,
            "steps": self.steps,
            "absorbed": self.absorbed,
            "n_occ": len(occ),
            "final_sites": np.array(occ, dtype=np.int64).reshape(len(occ), d),
            "mass_grid": np.array(mass_grid, dtype=np.int64),
            "int_mass": t.mass,
            "int_f0": t.f0,
            "int_vf1": t.vf1,
            "int_d2num": t.d2num,
            "int_d3num": t.d3num,
            "int_qv2num": t.qv2num,
            "log_t": np.array(self.log_t, dtype=float),
            "log_site": np.array(self.log_site, dtype=np.int64).reshape(len(self.log_site), d),
            "log_val": np.array(self.log_val, dtype=np.int8),
        }


def run_thinning(pack, init_sites, rng, t_end, grid, max_steps,
                 track_qv=False, record_log=False):
    eng = ThinningEngine(pack, init_sites, track_qv, record_log)
    return eng.drive(rng, t_end, grid, max_steps)


class CoupledEngine:
    """Three coupled processes sharing one event stream.

    Processes: the perturbed chain xi, a slowed plain voter chain xi_hat,
    and the dominating biased voter chain xi_bar (speed N - k_delta, bias
    c_bar through the mixed kernel in ``pack.k2``).  Each active site
    carries intensity Lambda = max(birth rates over processes currently
    vacant there) + max(death rates over processes occupied there); one
    uniform mark u then flips process pi iff u*Lambda < c_pi (births,
    left-anchored) or u*Lambda >= Lambda - c_pi (deaths, right-anchored).
    Rate nesting makes both dominations pathwise invariants; the two mark
    regions partition [0, Lambda) exactly, so marginal laws are exact.
    """

    def __init__(self, pack, init_sites):
        if pack.N <= pack.k_delta:
            raise EngineError("voter speed must exceed the domination certificate")
        self.pack = pack
        self.site_slot = {}
        self.slot_site = []
        self.ref = []
        self.occ = [[], [], []]
        self.f1 = [[], [], []]
        self.fb1 = []
        self.pb = []
        self.pd = []
        self.rates = [[], [], []]
        self.lam = []
        self.free = []
        self.tree = SumTree(256)
        self.n_occ = [0, 0, 0]
        self.time = 0.0
        self.steps = 0
        self.events = 0
        self.dom_checks = 0
        self.absorbed = False
        self.int_mass = [0.0, 0.0, 0.0]
        self._act = [tuple(int(c) for c in row) for row in pack.act_offs]
        self._act_p = [float(v) for v in pack.act_p]
        self._act_p2 = [float(v) for v in pack.act_p2]
        self._origin_k = self._act.index((0,) * pack.d)
        self._entries = pack.table_entries
        self.vhat = pack.N - pack.k_delta
        init = sorted(tuple(int(c) for c in s) for s in init_sites)
        for site in init:
            self.apply_flips(site, (True, True, True), init=True)

    def _alloc(self, site):
        if self.free:
            slot = self.free.pop()
            self.slot_site[slot] = site
            self.ref[slot] = 0
            for pi in range(3):
                self.occ[pi][slot] = False
                self.f1[pi][slot] = 0.0
                self.rates[pi][slot] = 0.0
            self.fb1[slot] = 0.0
            self.pb[slot] = 0.0
            self.pd[slot] = 0.0
            self.lam[slot] = 0.0
        else:
            slot = len(self.slot_site)
            self.slot_site.append(site)
            self.ref.append(0)
            for pi in range(3):
                self.occ[pi].append(False)
                self.f1[pi].append(0.0)
                self.rates[pi].append(0.0)
            self.fb1.append(0.0)
            self.pb.append(0.0)
            self.pd.append(0.0)
            self.lam.append(0.0)
            if slot >= self.tree.cap:
                self.tree.grow()
        self.site_slot[site] = slot
        return slot

    def _table_weights(self, site):
        b_tot = 0.0
        d_tot = 0.0
        occ0 = self.occ[0]
        lookup = self.site_slot
        for key, beta, delta in self._entries:
            hit = True
            for off in key:
                s2 = lookup.get(tuple(a + b for a, b in zip(site, off)))
                if s2 is None or not occ0[s2]:
                    hit = False
                    break
            if hit:
                b_tot += beta
                d_tot += delta
        return b_tot, d_tot

    def _recompute(self, slot):
        pack = self.pack
        N = pack.N
        vhat = self.vhat
        if pack.kind == KIND_LV:
            f1 = self.f1[0][slot]
            if self.occ[0][slot]:
                f0 = 1.0 - f1
                r0 = f0 * (N + pack.theta1 * f0)
            else:
                r0 = f1 * (N + pack.theta0 * f1)
        else:
            self.pb[slot], self.pd[slot] = self._table_weights(self.slot_site[slot])
            f1 = self.f1[0][slot]
            if self.occ[0][slot]:
                r0 = N * (1.0 - f1) + self.pd[slot] + pack.delta_empty
            else:
                r0 = N * f1 + self.pb[slot]
        if r0 < 0.0:
            if r0 < -pack.neg_tol:
                raise PositivityError(
                    f"negative flip rate {r0!r} at site {self.slot_site[slot]}"
                )
            r0 = 0.0
        f1h = self.f1[1][slot]
        r1 = vhat * (1.0 - f1h) if self.occ[1][slot] else vhat * f1h
        f1b = self.f1[2][slot]
        if self.occ[2][slot]:
            r2 = vhat * (1.0 - f1b)
        else:
            r2 = vhat * f1b + pack.c_bar * self.fb1[slot]
        self.rates[0][slot] = r0
        self.rates[1][slot] = r1
        self.rates[2][slot] = r2
        max_b = 0.0
        max_d = 0.0
        for pi, r in ((0, r0), (1, r1), (2, r2)):
            if self.occ[pi][slot]:
                if r > max_d:
                    max_d = r
            else:
                if r > max_b:
                    max_b = r
        self.lam[slot] = max_b + max_d
        self.tree.set(slot, self.lam[slot])

    def apply_flips(self, y, flips, init=False):
        _check_coord(y)
        act = self._act
        act_p = self._act_p
        act_p2 = self._act_p2
        origin_k = self._origin_k
        touched = None
        for pi in range(3):
            if not flips[pi]:
                continue
            if init:
                to_occ = True
            else:
                to_occ = not self.occ[pi][self.site_slot[y]]
            dr = 1 if to_occ else -1
            slots_this = []
            for k in range(len(act)):
                dep = act[k]
                x = tuple(a - b for a, b in zip(y, dep))
                slot = self.site_slot.get(x)
                if slot is None:
                    slot = self._alloc(x)
                self.ref[slot] += dr
                pk = act_p[k]
                if pk != 0.0:
                    self.f1[pi][slot] += dr * pk
                if pi == 2:
                    p2k = act_p2[k]
                    if p2k != 0.0:
                        self.fb1[slot] += dr * p2k
                if k == origin_k:
                    self.occ[pi][slot] = to_occ
                    self.n_occ[pi] += dr
                slots_this.append(slot)
            touched = slots_this
        if touched is None:
            return
        for slot in touched:
            if self.ref[slot] == 0:
                site = self.slot_site[slot]
                del self.site_slot[site]
                self.lam[slot] = 0.0
                for pi in range(3):
                    self.rates[pi][slot] = 0.0
                self.tree.set(slot, 0.0)
                self.free.append(slot)
                continue
            self._recompute(slot)
        yslot = self.site_slot.get(y)
        if yslot is not None:
            self.dom_checks += 1
            if (self.occ[0][yslot] and not self.occ[2][yslot]) or \
               (self.occ[1][yslot] and not self.occ[2][yslot]):
                raise DominationError(
                    f"process ordering broken at site {y}, t={self.time!r}"
                )

    def drive(self, rng, t_end, grid, max_steps):
        grid = list(grid)
        gi = 0
        mass_grid = [[0] * len(grid) for _ in range(3)]

        def flush(limit):
            nonlocal gi
            while gi < len(grid) and grid[gi] <= limit:
                for pi in range(3):
                    mass_grid[pi][gi] = self.n_occ[pi]
                gi += 1

        flush(self.time)
        while True:
            total = self.tree.total()
            if total <= 0.0:
                self.absorbed = True
                break
            u1 = rng.random()
            dt = -log1p(-u1) / total
            t_new = self.time + dt
            if t_new > t_end:
                break
            if self.steps >= max_steps:
                raise BudgetError(f"event budget {max_steps} exceeded at t={self.time!r}")
            flush(t_new)
            for pi in range(3):
                self.int_mass[pi] += self.n_occ[pi] * dt
            self.time = t_new
            self.steps += 1
            u2 = rng.random()
            slot = self.tree.select(u2)
            if self.lam[slot] <= 0.0 or self.ref[slot] == 0:
                for s in range(len(self.slot_site)):
                    if self.ref[s] != 0 and self.lam[s] > 0.0:
                        slot = s
                        break
            y = self.slot_site[slot]
            lam = self.lam[slot]
            m = rng.random() * lam
            flips = [False, False, False]
            any_flip = False
            for pi in range(3):
                r = self.rates[pi][slot]
                if self.occ[pi][slot]:
                    hit = m >= lam - r
                else:
                    hit = m < r
                flips[pi] = hit
                any_flip = any_flip or hit
            if any_flip:
                self.events += 1
                self.apply_flips(y, flips)
        flush(t_end)
        for pi in range(3):
            self.int_mass[pi] += self.n_occ[pi] * (t_end - self.time)
        self.time = t_end
        return self.result(mass_grid)

    def result(self, mass_grid):
        d = self.pack.d
        finals = []
        for pi in range(3):
            occ = [self.slot_site[s] for s in range(len(self.slot_site))
                   if self.ref[s] != 0 and self.occ[pi][s]]
            occ.sort()
            finals.append(np.array(occ, dtype=np.int64).reshape(len(occ), d))
        return {
            "time": self.time,
            "events": self.events,
            "steps": self.steps,
            "absorbed": self.absorbed,
            "dom_checks": self.dom_checks,
            "n_occ": self.n_occ[0],
            "n_occ_hat": self.n_occ[1],
            "n_occ_bar": self.n_occ[2],
            "final_sites": finals[0],
            "final_sites_hat": finals[1],
            "final_sites_bar": finals[2],
            "mass_grid": np.array(mass_grid[0], dtype=np.int64),
            "mass_grid_hat": np.array(mass_grid[1], dtype=np.int64),
            "mass_grid_bar": np.array(mass_grid[2], dtype=np.int64),
            "int_mass": self.int_mass[0],
            "int_mass_hat": self.int_mass[1],
            "int_mass_bar": self.int_mass[2],
        }


def run_coupled(pack, init_sites, rng, t_end, grid, max_steps):
    eng = CoupledEngine(pack, init_sites)
    return eng.drive(rng, t_end, grid, max_steps)


# -- coalescing random walks ---------------------------------------------


def _walk_system(positions, rate, t_limit, rng, cum, offs, watch,
                 run_to_limit=False):
    """Advance a small coalescing system to t_limit.

    ``watch`` is a dict the caller uses to harvest merge information:
    keys "t12" (first time walkers 1 and 2 share a class) and "t0"
    (first time walker 0 shares a class with anybody).  Walkers are
    identified by starting-index bit.  Returns final (positions, masks, t).
    Draws 3 uniforms per jump (wait, class pick, step); the wait draw that
    crosses t_limit is the last.  With ``run_to_limit`` a fully coalesced
    system keeps walking (needed when final positions matter).
    """
    pos = [tuple(p) for p in positions]
    masks = [1 << i for i in range(len(pos))]
    # immediate coincidences merge at time 0, scanning ascending pairs
    i = 0
    while i < len(pos):
        j = i + 1
        while j < len(pos):
            if pos[i] == pos[j]:
                masks[i] |= masks[j]
                del pos[j], masks[j]
                _note_merge(watch, masks[i], 0.0)
            else:
                j += 1
        i += 1
    t = 0.0
    while len(pos) > 1 or (run_to_limit and len(pos) > 0):
        total = rate * len(pos)
        u1 = rng.random()
        dt = -log1p(-u1) / total
        if t + dt > t_limit:
            t = t_limit
            break
        t += dt
        ci = int(rng.random() * len(pos))
        if ci == len(pos):
            ci = len(pos) - 1
        e = offs[_cum_search(cum, rng.random())]
        newp = tuple(a + b for a, b in zip(pos[ci], e))
        _check_coord(newp)
        pos[ci] = newp
        for j in range(len(pos)):
            if j != ci and pos[j] == newp:
                keep = ci if ci < j else j
                drop = j if ci < j else ci
                masks[keep] |= masks[drop]
                pos[keep] = newp
                del pos[drop], masks[drop]
                _note_merge(watch, masks[keep], t)
                break
        if watch.get("stop_when_decided") and _decided(watch):
            break
    return pos, masks, t


def _note_merge(watch, mask, t):
    if watch.get("t12") is None and (mask & 2) and (mask & 4):
        watch["t12"] = t
    if watch.get("t0") is None and (mask & 1) and (mask & ~1):
        watch["t0"] = t


def _decided(watch):
    return watch.get("t0") is not None


def walk_single(positions, rate, t_limit, rng, cum, offs,
                run_to_limit=False):
    """Public single-run advance used by the module-level system class."""
    watch = {"t12": None, "t0": None}
    return _walk_system(positions, rate, t_limit, rng, cum, offs, watch,
                        run_to_limit=run_to_limit)


def tau_leq_trials(positions, d, cum, offs, rate, horizon, reps, rng):
    """Count replicates whose full coalescence time is <= horizon."""
    hits = 0
    base = [tuple(int(c) for c in p) for p in np.asarray(positions).reshape(-1, d)]
    cum = [float(v) for v in cum]
    offs = [tuple(int(c) for c in row) for row in offs]
    for _ in range(reps):
        watch = {"t12": None, "t0": None}
        pos, _, t = _walk_system(base, rate, horizon, rng, cum, offs, watch)
        if len(pos) == 1:
            hits += 1
    return hits


def escape_ladder_trials(d, cum, offs, rate, horizons, reps, rng, sep=None):
    """Two-walk escape counts at each horizon, common paths per replicate.

    The pair starts at (0, e) with e kernel-sampled per replicate unless
    ``sep`` pins it.  counts[j] accrues 1 when no coalescence happened by
    horizons[j]; per-replicate the indicators are monotone in j.
    """
    cum = [float(v) for v in cum]
    offs = [tuple(int(c) for c in row) for row in offs]
    horizons = [float(h) for h in horizons]
    hmax = horizons[-1]
    counts = [0] * len(horizons)
    origin = (0,) * d
    for _ in range(reps):
        if sep is None:
            e = offs[_cum_search(cum, rng.random())]
        else:
            e = tuple(sep)
        watch = {"t12": None, "t0": None}
        pos, _, t = _walk_system([origin, e], rate, hmax, rng, cum, offs, watch)
        tau = t if len(pos) == 1 else None
        for j, h in enumerate(horizons):
            if tau is None or tau > h:
                counts[j] += 1
    return counts


def beta_delta_trials(d, cum, offs, rate, horizon, reps, rng, e1=None, e2=None):
    """(beta_hits, delta_hits) for the three-walk event pair.

    delta: walker 0's class meets nobody by the horizon.  beta: same and
    walkers 1,2 coalesced by the horizon.  beta <= delta per replicate.
    """
    cum = [float(v) for v in cum]
    offs = [tuple(int(c) for c in row) for row in offs]
    origin = (0,) * d
    b_hits = 0
    d_hits = 0
    for _ in range(reps):
        a1 = offs[_cum_search(cum, rng.random())] if e1 is None else tuple(e1)
        a2 = offs[_cum_search(cum, rng.random())] if e2 is None else tuple(e2)
        watch = {"t12": None, "t0": None, "stop_when_decided": True}
        _walk_system([origin, a1, a2], rate, horizon, rng, cum, offs, watch)
        if watch["t0"] is None:
            d_hits += 1
            if watch["t12"] is not None:
                b_hits += 1
    return b_hits, d_hits


def duality_trials(positions, d, cum, offs, rate, t_end, reps, rng, targets):
    """Count replicates whose surviving classes all sit in ``targets`` at t_end."""
    cum = [float(v) for v in cum]
    offs = [tuple(int(c) for c in row) for row in offs]
    base = [tuple(int(c) for c in p) for p in np.asarray(positions).reshape(-1, d)]
    tset = set(tuple(int(c) for c in t) for t in targets)
    hits = 0
    for _ in range(reps):
        watch = {"t12": None, "t0": None}
        pos, _, t = _walk_system(base, rate, t_end, rng, cum, offs, watch,
                                 run_to_limit=True)
        if all(p in tset for p in pos):
            hits += 1
    return hits
