# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled twin of the pure-Python simulation core.

Mirrors svlv._core_py line for line: same draw order, same iteration
order, same floating-point expression grouping.  A given seed produces
byte-identical event paths on either backend; the cross-backend tests
rely on that, so keep every change synchronized with the twin.

Sites are packed into one int64, 21 bits per axis, axis 0 most
significant so integer order equals tuple lexicographic order (d <= 3;
wider models fall back to the Python twin via svlv._backend).
"""

from libc.math cimport log1p
from libcpp.vector cimport vector
from libcpp.pair cimport pair
from libcpp.algorithm cimport sort as cpp_sort
from libcpp.unordered_set cimport unordered_set
from cpython.pycapsule cimport PyCapsule_GetPointer
from numpy.random cimport bitgen_t

cimport numpy as cnp
import numpy as np

cnp.import_array()

from ._errors import BudgetError, DominationError, EngineError, PositivityError

BACKEND_NAME = "c"

ctypedef long long i64
ctypedef pair[i64, int] site_slot_pair

DEF SHIFT = 21
DEF FMASK = (1 << 21) - 1
DEF FOFF = 1 << 20
# legal field range; mirrors the twin's +/-(2^20 - 64) coordinate guard
DEF F_LO = 65
DEF F_HI = (1 << 21) - 65
DEF MAX_OFF = 64
DEF REFRESH_EVERY = 65536

KIND_VOTER = 0
KIND_LV = 1
KIND_BIASED = 2
KIND_TABLE = 3

cdef int C_VOTER = 0
cdef int C_LV = 1
cdef int C_BIASED = 2
cdef int C_TABLE = 3

# Fibonacci multiplier, assembled to stay inside unsigned arithmetic
cdef unsigned long long HASH_MULT = \
    (<unsigned long long>0x9E3779B9 << 32) | <unsigned long long>0x7F4A7C15


cdef inline long long slot_hash(long long k, long long mask) noexcept nogil:
    return <long long>((<unsigned long long>k * HASH_MULT) >> 13) & mask


cdef bitgen_t* get_bitgen(object rng) except NULL:
    return <bitgen_t*> PyCapsule_GetPointer(
        rng.bit_generator.capsule, "BitGenerator")


cdef inline double rnd(bitgen_t* bg) noexcept nogil:
    return bg.next_double(bg.state)


cdef inline int cum_search(double* cum, int k, double u) noexcept nogil:
    """First index i with u < cum[i]; cum[k-1] == 1.0 and u in [0,1)."""
    cdef int lo = 0, hi = k - 1, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if u < cum[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


cdef inline long long enc_fields(long long* c, int d) noexcept nogil:
    cdef long long out = 0
    cdef int i
    for i in range(d):
        out = (out << SHIFT) | <long long>(c[i] + FOFF)
    return out


cdef inline bint fields_legal(long long key, int d) noexcept nogil:
    cdef int i
    cdef long long f
    for i in range(d):
        f = key >> (SHIFT * i) & FMASK
        if f < F_LO or f > F_HI:
            return False
    return True


cdef tuple decode_key(long long key, int d):
    cdef int i
    cdef long long f
    out = []
    for i in range(d - 1, -1, -1):
        f = key >> (SHIFT * i) & FMASK
        out.append(int(f - FOFF))
    return tuple(out)


cdef int check_site(long long key, int d) except -1:
    if not fields_legal(key, d):
        raise EngineError(
            f"site {decode_key(key, d)} leaves the supported coordinate range")
    return 0


def _decode_array(enc, int d):
    """(n,) int64 encodes -> (n, d) coordinate array."""
    enc = np.asarray(enc, dtype=np.int64)
    out = np.empty((len(enc), d), dtype=np.int64)
    for i in range(d):
        out[:, d - 1 - i] = ((enc >> (SHIFT * i)) & FMASK) - FOFF
    return out


cdef long long delta_of(offset_row, int d) except? -1:
    """Signed encode delta of a lattice offset (no field bias)."""
    cdef long long out = 0
    cdef long long c
    cdef int i
    for i in range(d):
        c = <long long> offset_row[i]
        if c > MAX_OFF or c < -MAX_OFF:
            raise EngineError("offset exceeds the compiled-core field budget")
        out = (out << SHIFT) + c
    return out


cdef long long encode_tuple(site, int d) except? -1:
    cdef long long c[3]
    cdef int i
    for i in range(d):
        c[i] = <long long> site[i]
        if c[i] >= FOFF - MAX_OFF or c[i] <= -(FOFF - MAX_OFF):
            raise EngineError(
                f"site {tuple(site)} leaves the supported coordinate range")
    return enc_fields(c, d)


# -- open-addressing map int64 -> int32 ------------------------------------
# Values are slot numbers.  Erase only tombstones the value so probe
# chains never break; rehash drops tombstoned cells.

cdef class _Map:
    cdef vector[long long] keys
    cdef vector[int] vals
    cdef long long mask
    cdef long long fill

    def __cinit__(self, long long cap=1024):
        cdef long long c = 16
        while c < cap:
            c <<= 1
        self.keys.assign(c, <long long>-1)
        self.vals.assign(c, -1)
        self.mask = c - 1
        self.fill = 0

    cdef inline int get(self, long long k) noexcept:
        cdef long long i = slot_hash(k, self.mask)
        while True:
            if self.keys[i] == k:
                return self.vals[i]
            if self.keys[i] == -1:
                return -1
            i = i + 1 & self.mask

    cdef void put(self, long long k, int v):
        cdef long long i = slot_hash(k, self.mask)
        while True:
            if self.keys[i] == k:
                self.vals[i] = v
                return
            if self.keys[i] == -1:
                self.keys[i] = k
                self.vals[i] = v
                self.fill += 1
                if self.fill * 10 >= (self.mask + 1) * 7:
                    self._rehash()
                return
            i = i + 1 & self.mask

    cdef inline void erase(self, long long k) noexcept:
        cdef long long i = slot_hash(k, self.mask)
        while True:
            if self.keys[i] == k:
                self.vals[i] = -1
                return
            if self.keys[i] == -1:
                return
            i = i + 1 & self.mask

    cdef void _rehash(self):
        cdef vector[long long] ok = self.keys
        cdef vector[int] ov = self.vals
        cdef long long ncap = (self.mask + 1) * 2
        cdef long long i, j
        self.keys.assign(ncap, <long long>-1)
        self.vals.assign(ncap, -1)
        self.mask = ncap - 1
        self.fill = 0
        for i in range(<long long>ok.size()):
            if ok[i] != -1 and ov[i] >= 0:
                j = slot_hash(ok[i], self.mask)
                while self.keys[j] != -1:
                    j = j + 1 & self.mask
                self.keys[j] = ok[i]
                self.vals[j] = ov[i]
                self.fill += 1


# -- sum tree ----------------------------------------------------------------


cdef class SumTreeC:
    """Complete binary tree of slot rates; parents are exact child sums."""

    cdef vector[double] tree
    cdef long long cap

    def __cinit__(self, long long cap=256):
        cdef long long c = 1
        while c < cap:
            c <<= 1
        self.cap = c
        self.tree.assign(2 * c, 0.0)

    cdef inline void set(self, long long slot, double value) noexcept:
        cdef long long i = self.cap + slot
        self.tree[i] = value
        i >>= 1
        while i:
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]
            i >>= 1

    cdef inline double total(self) noexcept:
        return self.tree[1]

    cdef inline long long select(self, double u) noexcept:
        cdef double target = u * self.tree[1]
        cdef long long i = 1, left
        while i < self.cap:
            left = i + i
            if target < self.tree[left]:
                i = left
            else:
                target -= self.tree[left]
                i = left + 1
        return i - self.cap

    cdef void grow(self):
        cdef vector[double] old = self.tree
        cdef long long oc = self.cap, nc = oc * 2, i
        self.tree.assign(2 * nc, 0.0)
        for i in range(oc):
            self.tree[nc + i] = old[oc + i]
        for i in range(nc - 1, 0, -1):
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]
        self.cap = nc


# -- prepared model ----------------------------------------------------------


cdef class PackC:
    cdef int d, kind, n_act, n_k, n_k2, n_ent, origin_k
    cdef double N, theta0, theta1, bias, k_delta, c_bar, delta_empty, neg_tol
    cdef vector[long long] act_delta
    cdef vector[double] act_p, act_p2
    cdef vector[long long] k_dx
    cdef vector[double] k_probs, k_cum
    cdef vector[long long] k2_dx
    cdef vector[double] k2_probs, k2_cum
    cdef vector[int] ent_start
    cdef vector[long long] ent_dx
    cdef vector[double] ent_beta, ent_delta
    cdef bint has_domain
    cdef long long dom_flo[3]
    cdef long long dom_fhi[3]

    cdef inline bint in_domain(self, long long key) noexcept:
        cdef int i
        cdef long long f
        if not self.has_domain:
            return True
        for i in range(self.d):
            f = key >> (SHIFT * i) & FMASK
            if f < self.dom_flo[i] or f > self.dom_fhi[i]:
                return False
        return True


def make_pack(pack):
    """Convert a svlv._pack.ModelPack into the compiled layout."""
    cdef PackC p = PackC()
    cdef int d = pack.d
    if d > 3 or d < 1:
        raise EngineError("compiled core handles d in 1..3")
    p.d = d
    p.kind = pack.kind
    p.N = pack.N
    p.theta0 = pack.theta0
    p.theta1 = pack.theta1
    p.bias = pack.bias
    p.k_delta = pack.k_delta
    p.c_bar = pack.c_bar
    p.delta_empty = pack.delta_empty
    p.neg_tol = pack.neg_tol
    cdef int i, j
    act = pack.act_offs
    p.n_act = len(act)
    p.origin_k = -1
    for i in range(p.n_act):
        p.act_delta.push_back(delta_of(act[i], d))
        p.act_p.push_back(pack.act_p[i])
        p.act_p2.push_back(pack.act_p2[i])
        if p.act_delta[i] == 0:
            p.origin_k = i
    if p.origin_k < 0:
        raise EngineError("activation offsets lack the origin")
    p.n_k = len(pack.k_offsets)
    for i in range(p.n_k):
        p.k_dx.push_back(delta_of(pack.k_offsets[i], d))
        p.k_probs.push_back(pack.k_probs[i])
        p.k_cum.push_back(pack.k_cum[i])
    p.n_k2 = len(pack.k2_offsets)
    for i in range(p.n_k2):
        p.k2_dx.push_back(delta_of(pack.k2_offsets[i], d))
        p.k2_probs.push_back(pack.k2_probs[i])
        p.k2_cum.push_back(pack.k2_cum[i])
    ent_len = pack.ent_len
    p.n_ent = 0 if ent_len is None else len(ent_len)
    p.ent_start.push_back(0)
    j = 0
    for i in range(p.n_ent):
        p.ent_beta.push_back(pack.ent_beta[i])
        p.ent_delta.push_back(pack.ent_delta[i])
        for _ in range(ent_len[i]):
            p.ent_dx.push_back(delta_of(pack.ent_offs[j], d))
            j += 1
        p.ent_start.push_back(j)
    p.has_domain = pack.has_domain
    if p.has_domain:
        for i in range(d):
            # axis i occupies the field at shift SHIFT*(d-1-i)
            p.dom_flo[d - 1 - i] = <long long>pack.dom_lo[i] + FOFF
            p.dom_fhi[d - 1 - i] = <long long>pack.dom_hi[i] + FOFF
    return p


# -- direct engine ------------------------------------------------------------


cdef class DirectC:
    cdef PackC pk
    cdef bint track_qv, record_log, lex
    cdef _Map map
    cdef SumTreeC tree
    cdef vector[long long] slot_site
    cdef vector[int] ref
    cdef vector[char] occ
    cdef vector[double] f1, fb1, pb, pd, rate
    cdef vector[int] free_list
    cdef vector[int] touched
    cdef long long n_occ, events, steps
    cdef double time
    cdef bint absorbed
    cdef double s_f0, s_f0sq, s_vf1, s_vf1sq, s_pb_vac, s_pb_occ, s_pd_occ
    cdef double i_mass, i_f0, i_vf1, i_d2, i_d3, i_qv2
    cdef vector[double] log_t
    cdef vector[long long] log_site
    cdef vector[char] log_val

    def __cinit__(self, PackC pk, init_enc, bint track_qv, bint record_log,
                  bint lex):
        self.pk = pk
        self.track_qv = track_qv
        self.record_log = record_log
        self.lex = lex
        self.map = _Map(1024)
        self.tree = SumTreeC(256)
        self.n_occ = 0
        self.time = 0.0
        self.events = 0
        self.steps = 0
        self.absorbed = False
        self.s_f0 = self.s_f0sq = self.s_vf1 = self.s_vf1sq = 0.0
        self.s_pb_vac = self.s_pb_occ = self.s_pd_occ = 0.0
        self.i_mass = self.i_f0 = self.i_vf1 = 0.0
        self.i_d2 = self.i_d3 = self.i_qv2 = 0.0
        cdef long long e
        for e in init_enc:
            self.flip(e, True)

    cdef int _alloc(self, long long site) except -1:
        cdef int slot
        if self.free_list.size() > 0:
            slot = self.free_list.back()
            self.free_list.pop_back()
            self.slot_site[slot] = site
            self.ref[slot] = 0
            self.occ[slot] = 0
            self.f1[slot] = 0.0
            self.fb1[slot] = 0.0
            self.pb[slot] = 0.0
            self.pd[slot] = 0.0
            self.rate[slot] = 0.0
        else:
            slot = <int> self.slot_site.size()
            self.slot_site.push_back(site)
            self.ref.push_back(0)
            self.occ.push_back(0)
            self.f1.push_back(0.0)
            self.fb1.push_back(0.0)
            self.pb.push_back(0.0)
            self.pd.push_back(0.0)
            self.rate.push_back(0.0)
            if slot >= self.tree.cap:
                self.tree.grow()
        self.map.put(site, slot)
        return slot

    cdef inline void _qv_remove(self, int slot) noexcept:
        cdef double f1, f0
        if not self.track_qv or self.ref[slot] == 0:
            return
        f1 = self.f1[slot]
        if self.occ[slot]:
            f0 = 1.0 - f1
            self.s_f0 -= f0
            self.s_f0sq -= f0 * f0
            if self.pk.kind == C_TABLE:
                self.s_pb_occ -= self.pb[slot]
                self.s_pd_occ -= self.pd[slot]
        else:
            self.s_vf1 -= f1
            self.s_vf1sq -= f1 * f1
            if self.pk.kind == C_TABLE:
                self.s_pb_vac -= self.pb[slot]

    cdef inline void _qv_add(self, int slot) noexcept:
        cdef double f1, f0
        if not self.track_qv or self.ref[slot] == 0:
            return
        f1 = self.f1[slot]
        if self.occ[slot]:
            f0 = 1.0 - f1
            self.s_f0 += f0
            self.s_f0sq += f0 * f0
            if self.pk.kind == C_TABLE:
                self.s_pb_occ += self.pb[slot]
                self.s_pd_occ += self.pd[slot]
        else:
            self.s_vf1 += f1
            self.s_vf1sq += f1 * f1
            if self.pk.kind == C_TABLE:
                self.s_pb_vac += self.pb[slot]

    cdef inline void _table_weights(self, long long site, double* bw,
                                    double* dw) noexcept:
        cdef double b_tot = 0.0, d_tot = 0.0
        cdef int i, j, s2
        cdef bint hit
        for i in range(self.pk.n_ent):
            hit = True
            for j in range(self.pk.ent_start[i], self.pk.ent_start[i + 1]):
                s2 = self.map.get(site + self.pk.ent_dx[j])
                if s2 < 0 or not self.occ[s2]:
                    hit = False
                    break
            if hit:
                b_tot += self.pk.ent_beta[i]
                d_tot += self.pk.ent_delta[i]
        bw[0] = b_tot
        dw[0] = d_tot

    cdef double _compute_rate(self, int slot) except? -1.0:
        cdef PackC pk = self.pk
        cdef long long site = self.slot_site[slot]
        cdef double f1, f0, r
        if pk.has_domain and not pk.in_domain(site):
            return 0.0
        f1 = self.f1[slot]
        if self.occ[slot]:
            f0 = 1.0 - f1
            if pk.kind == C_LV:
                r = f0 * (pk.N + pk.theta1 * f0)
            elif pk.kind == C_TABLE:
                r = pk.N * f0 + self.pd[slot] + pk.delta_empty
            else:
                r = pk.N * f0
        else:
            if pk.kind == C_LV:
                r = f1 * (pk.N + pk.theta0 * f1)
            elif pk.kind == C_TABLE:
                r = pk.N * f1 + self.pb[slot]
            elif pk.kind == C_BIASED:
                r = pk.N * f1 + pk.bias * self.fb1[slot]
            else:
                r = pk.N * f1
        if r < 0.0:
            if r < -pk.neg_tol:
                raise PositivityError(
                    f"negative flip rate {r!r} at site "
                    f"{decode_key(site, pk.d)} (t={self.time!r})")
            r = 0.0
        return r

    cdef int flip(self, long long y, bint to_occ) except -1:
        check_site(y, self.pk.d)
        cdef int dr = 1 if to_occ else -1
        # conditional expressions must not feed vector writes directly:
        # cython routes them through a temporary copy of the container
        cdef char ov = 1 if to_occ else 0
        cdef int k, slot
        cdef long long x
        cdef double pkv, r
        cdef PackC pk = self.pk
        self.touched.clear()
        for k in range(pk.n_act):
            x = y - pk.act_delta[k]
            slot = self.map.get(x)
            if slot < 0:
                slot = self._alloc(x)
            self._qv_remove(slot)
            self.ref[slot] += dr
            pkv = pk.act_p[k]
            if pkv != 0.0:
                self.f1[slot] += dr * pkv
            pkv = pk.act_p2[k]
            if pkv != 0.0:
                self.fb1[slot] += dr * pkv
            if k == pk.origin_k:
                self.occ[slot] = ov
                self.n_occ += dr
            self.touched.push_back(slot)
        cdef bint table = pk.kind == C_TABLE
        cdef double bw, dw
        cdef size_t ti
        for ti in range(self.touched.size()):
            slot = self.touched[ti]
            if self.ref[slot] == 0:
                self.map.erase(self.slot_site[slot])
                self.rate[slot] = 0.0
                self.tree.set(slot, 0.0)
                self.free_list.push_back(slot)
                continue
            if table:
                self._table_weights(self.slot_site[slot], &bw, &dw)
                self.pb[slot] = bw
                self.pd[slot] = dw
            r = self._compute_rate(slot)
            self.rate[slot] = r
            self._qv_add(slot)
            self.tree.set(slot, r)
        return 0

    cdef int refresh(self) except -1:
        cdef PackC pk = self.pk
        cdef int slot, j, s2
        cdef long long site
        cdef double f1, fb1, bw, dw, r
        self.s_f0 = self.s_f0sq = self.s_vf1 = self.s_vf1sq = 0.0
        self.s_pb_vac = self.s_pb_occ = self.s_pd_occ = 0.0
        for slot in range(<int> self.slot_site.size()):
            if self.ref[slot] == 0:
                continue
            site = self.slot_site[slot]
            f1 = 0.0
            for j in range(pk.n_k):
                s2 = self.map.get(site + pk.k_dx[j])
                if s2 >= 0 and self.occ[s2]:
                    f1 += pk.k_probs[j]
            self.f1[slot] = f1
            if pk.kind == C_BIASED:
                fb1 = 0.0
                for j in range(pk.n_k2):
                    s2 = self.map.get(site + pk.k2_dx[j])
                    if s2 >= 0 and self.occ[s2]:
                        fb1 += pk.k2_probs[j]
                self.fb1[slot] = fb1
            if pk.kind == C_TABLE:
                self._table_weights(site, &bw, &dw)
                self.pb[slot] = bw
                self.pd[slot] = dw
            r = self._compute_rate(slot)
            self.rate[slot] = r
            self.tree.set(slot, r)
            self._qv_add(slot)
        return 0

    cdef long long _select_lex(self, double u):
        cdef vector[site_slot_pair] items
        cdef int slot
        cdef double total = self.tree.total()
        for slot in range(<int> self.slot_site.size()):
            if self.ref[slot] != 0 and self.rate[slot] > 0.0:
                items.push_back(
                    site_slot_pair(self.slot_site[slot], slot))
        cpp_sort(items.begin(), items.end())
        cdef double target = u * total
        cdef double acc = 0.0
        cdef size_t i
        for i in range(items.size()):
            acc += self.rate[items[i].second]
            if target < acc:
                return items[i].second
        return items[items.size() - 1].second

    cdef long long _select(self, double u):
        cdef long long slot
        cdef int s
        if self.lex:
            return self._select_lex(u)
        slot = self.tree.select(u)
        if self.rate[slot] <= 0.0 or self.ref[slot] == 0:
            # FP boundary landing on a dead slot: deterministic rescan.
            for s in range(<int> self.slot_site.size()):
                if self.ref[s] != 0 and self.rate[s] > 0.0:
                    return s
        return slot

    cdef inline void _integrate(self, double dt) noexcept:
        cdef double pbv, pbo, pdo
        self.i_mass += self.n_occ * dt
        if not self.track_qv:
            return
        if self.pk.kind == C_LV:
            pbv = self.pk.theta0 * self.s_vf1sq
            pbo = self.pk.theta0 * (self.n_occ - 2.0 * self.s_f0 + self.s_f0sq)
            pdo = self.pk.theta1 * self.s_f0sq
        elif self.pk.kind == C_TABLE:
            pbv = self.s_pb_vac
            pbo = self.s_pb_occ
            pdo = self.s_pd_occ + self.pk.delta_empty * self.n_occ
        else:
            pbv = 0.0
            pbo = 0.0
            pdo = 0.0
        self.i_f0 += self.s_f0 * dt
        self.i_vf1 += self.s_vf1 * dt
        # birth table over all sites, matching the drift pairing with i_d3
        self.i_d2 += (pbv + pbo) * dt
        self.i_d3 += (pbo + pdo) * dt
        self.i_qv2 += (pbv + pdo) * dt

    def drive(self, object rng, double t_end, grid, long long max_steps):
        cdef bitgen_t* bg = get_bitgen(rng)
        cdef double[:] g = np.ascontiguousarray(grid, dtype=float)
        cdef long long ng = g.shape[0], gi = 0
        mass_grid = np.zeros(ng, dtype=np.int64)
        cdef cnp.int64_t[:] mg = mass_grid
        cdef double total, u1, dt, t_new, u2
        cdef long long slot
        cdef bint to_occ
        cdef char lval
        while gi < ng and g[gi] <= self.time:
            mg[gi] = self.n_occ
            gi += 1
        while True:
            total = self.tree.total()
            if total <= 0.0:
                self.absorbed = True
                break
            u1 = rnd(bg)
            dt = -log1p(-u1) / total
            t_new = self.time + dt
            if t_new > t_end:
                break
            if self.steps >= max_steps:
                raise BudgetError(
                    f"event budget {max_steps} exceeded at t={self.time!r}")
            while gi < ng and g[gi] <= t_new:
                mg[gi] = self.n_occ
                gi += 1
            self._integrate(dt)
            self.time = t_new
            u2 = rnd(bg)
            slot = self._select(u2)
            to_occ = not self.occ[slot]
            if self.record_log:
                self.log_t.push_back(self.time)
                self.log_site.push_back(self.slot_site[slot])
                lval = 1 if to_occ else 0
                self.log_val.push_back(lval)
            self.flip(self.slot_site[slot], to_occ)
            self.steps += 1
            self.events += 1
            if self.steps % REFRESH_EVERY == 0:
                self.refresh()
        while gi < ng:
            mg[gi] = self.n_occ
            gi += 1
        self._integrate(t_end - self.time)
        self.time = t_end
        return self.result(mass_grid)

    def result(self, mass_grid):
        cdef vector[long long] occ_enc
        cdef int slot
        for slot in range(<int> self.slot_site.size()):
            if self.ref[slot] != 0 and self.occ[slot]:
                occ_enc.push_back(self.slot_site[slot])
        cpp_sort(occ_enc.begin(), occ_enc.end())
        finals = np.empty(occ_enc.size(), dtype=np.int64)
        cdef cnp.int64_t[:] fv = finals
        cdef size_t i
        for i in range(occ_enc.size()):
            fv[i] = occ_enc[i]
        lt = np.empty(self.log_t.size(), dtype=float)
        ls = np.empty(self.log_site.size(), dtype=np.int64)
        lv = np.empty(self.log_val.size(), dtype=np.int8)
        cdef double[:] ltv = lt
        cdef cnp.int64_t[:] lsv = ls
        cdef cnp.int8_t[:] lvv = lv
        for i in range(self.log_t.size()):
            ltv[i] = self.log_t[i]
            lsv[i] = self.log_site[i]
            lvv[i] = self.log_val[i]
        return {
            "time": self.time,
            "events": self.events,
            "steps": self.steps,
            "absorbed": self.absorbed,
            "n_occ": self.n_occ,
            "final_sites": _decode_array(finals, self.pk.d),
            "mass_grid": mass_grid,
            "int_mass": self.i_mass,
            "int_f0": self.i_f0,
            "int_vf1": self.i_vf1,
            "int_d2num": self.i_d2,
            "int_d3num": self.i_d3,
            "int_qv2num": self.i_qv2,
            "log_t": lt,
            "log_site": _decode_array(ls, self.pk.d),
            "log_val": lv,
        }


def run_direct(pack, init_sites, rng, double t_end, grid,
               long long max_steps, bint track_qv=False,
               bint record_log=False, selection="tree"):
    cdef PackC pk = make_pack(pack)
    init_enc = [encode_tuple(s, pk.d) for s in init_sites]
    cdef DirectC eng = DirectC(pk, init_enc, track_qv, record_log,
                               selection == "lex")
    return eng.drive(rng, t_end, grid, max_steps)


# -- thinning engine ----------------------------------------------------------


cdef class _QvMapC:
    """Occupied-neighbour densities for the thinning engine's integrals."""

    cdef PackC pk
    cdef _Map map
    cdef vector[int] ref
    cdef vector[double] f1
    cdef vector[char] occ
    cdef vector[int] free_list
    cdef double s_f0, s_f0sq, s_vf1, s_vf1sq

    def __cinit__(self, PackC pk):
        self.pk = pk
        self.map = _Map(1024)
        self.s_f0 = self.s_f0sq = self.s_vf1 = self.s_vf1sq = 0.0

    cdef inline void _remove(self, int idx) noexcept:
        cdef double f0
        if self.ref[idx] == 0:
            return
        if self.occ[idx]:
            f0 = 1.0 - self.f1[idx]
            self.s_f0 -= f0
            self.s_f0sq -= f0 * f0
        else:
            self.s_vf1 -= self.f1[idx]
            self.s_vf1sq -= self.f1[idx] * self.f1[idx]

    cdef inline void _add(self, int idx) noexcept:
        cdef double f0
        if self.ref[idx] == 0:
            return
        if self.occ[idx]:
            f0 = 1.0 - self.f1[idx]
            self.s_f0 += f0
            self.s_f0sq += f0 * f0
        else:
            self.s_vf1 += self.f1[idx]
            self.s_vf1sq += self.f1[idx] * self.f1[idx]

    cdef int flip(self, long long y, bint to_occ) except -1:
        cdef int dr = 1 if to_occ else -1
        cdef char ov = 1 if to_occ else 0
        cdef int k, idx
        cdef long long x
        cdef double pkv
        for k in range(self.pk.n_act):
            x = y - self.pk.act_delta[k]
            idx = self.map.get(x)
            if idx < 0:
                if self.free_list.size() > 0:
                    idx = self.free_list.back()
                    self.free_list.pop_back()
                    self.ref[idx] = 0
                    self.f1[idx] = 0.0
                    self.occ[idx] = 0
                else:
                    idx = <int> self.ref.size()
                    self.ref.push_back(0)
                    self.f1.push_back(0.0)
                    self.occ.push_back(0)
                self.map.put(x, idx)
            self._remove(idx)
            self.ref[idx] += dr
            pkv = self.pk.act_p[k]
            if pkv != 0.0:
                self.f1[idx] += dr * pkv
            if k == self.pk.origin_k:
                self.occ[idx] = ov
            if self.ref[idx] == 0:
                self.map.erase(x)
                self.free_list.push_back(idx)
            else:
                self._add(idx)
        return 0


cdef class ThinC:
    cdef PackC pk
    cdef bint track_qv, record_log, has_qv
    cdef _Map index
    cdef vector[long long] occupied
    cdef _QvMapC qv
    cdef double time, t0v, t1v, birth_dom, death_dom, per_occ
    cdef long long events, steps
    cdef bint absorbed
    cdef double i_mass, i_f0, i_vf1, i_d2, i_d3, i_qv2
    cdef vector[double] log_t
    cdef vector[long long] log_site
    cdef vector[char] log_val

    def __cinit__(self, PackC pk, init_enc, bint track_qv, bint record_log):
        if pk.kind != C_VOTER and pk.kind != C_LV:
            raise EngineError(
                "thinning engine supports voter and competition runs")
        self.pk = pk
        self.track_qv = track_qv
        self.record_log = record_log
        self.index = _Map(1024)
        self.has_qv = track_qv
        self.qv = _QvMapC(pk) if track_qv else None
        self.time = 0.0
        self.events = 0
        self.steps = 0
        self.absorbed = False
        self.i_mass = self.i_f0 = self.i_vf1 = 0.0
        self.i_d2 = self.i_d3 = self.i_qv2 = 0.0
        self.t0v = pk.theta0
        self.t1v = pk.theta1
        self.birth_dom = pk.N + (self.t0v if self.t0v > 0.0 else 0.0)
        self.death_dom = pk.N + (self.t1v if self.t1v > 0.0 else 0.0)
        self.per_occ = self.birth_dom + self.death_dom
        if pk.N + self.t0v < 0.0 or pk.N + self.t1v < 0.0:
            raise PositivityError(
                "competition strength exceeds the voter speed")
        enc = sorted(init_enc)
        cdef long long e
        for e in enc:
            self._set(e, True)

    cdef int _set(self, long long site, bint to_occ) except -1:
        cdef int idx
        cdef long long last
        if to_occ:
            self.index.put(site, <int> self.occupied.size())
            self.occupied.push_back(site)
        else:
            idx = self.index.get(site)
            self.index.erase(site)
            last = self.occupied.back()
            self.occupied.pop_back()
            if last != site:
                self.occupied[idx] = last
                self.index.put(last, idx)
        if self.has_qv:
            self.qv.flip(site, to_occ)
        return 0

    cdef inline void _integrate(self, double dt) noexcept:
        cdef long long n = <long long> self.occupied.size()
        cdef double pbv, pbo, pdo
        self.i_mass += n * dt
        if not self.has_qv:
            return
        pbv = self.t0v * self.qv.s_vf1sq
        pbo = self.t0v * (n - 2.0 * self.qv.s_f0 + self.qv.s_f0sq)
        pdo = self.t1v * self.qv.s_f0sq
        self.i_f0 += self.qv.s_f0 * dt
        self.i_vf1 += self.qv.s_vf1 * dt
        self.i_d2 += (pbv + pbo) * dt
        self.i_d3 += (pbo + pdo) * dt
        self.i_qv2 += (pbv + pdo) * dt

    def drive(self, object rng, double t_end, grid, long long max_steps):
        cdef bitgen_t* bg = get_bitgen(rng)
        cdef double[:] g = np.ascontiguousarray(grid, dtype=float)
        cdef long long ng = g.shape[0], gi = 0
        mass_grid = np.zeros(ng, dtype=np.int64)
        cdef cnp.int64_t[:] mg = mass_grid
        cdef PackC pk = self.pk
        cdef double N = pk.N
        cdef double* cum = NULL
        if pk.n_k > 0:
            cum = &pk.k_cum[0]
        cdef long long n, zi
        cdef double total, u1, dt, t_new, u5
        cdef long long z, x, x2, flip_site = 0
        cdef int ki, flip_val
        cdef bint birth, have_flip
        while gi < ng and g[gi] <= self.time:
            mg[gi] = <long long> self.occupied.size()
            gi += 1
        while True:
            n = <long long> self.occupied.size()
            if n == 0:
                self.absorbed = True
                break
            total = self.per_occ * n
            u1 = rnd(bg)
            dt = -log1p(-u1) / total
            t_new = self.time + dt
            if t_new > t_end:
                break
            if self.steps >= max_steps:
                raise BudgetError(
                    f"event budget {max_steps} exceeded at t={self.time!r}")
            while gi < ng and g[gi] <= t_new:
                mg[gi] = n
                gi += 1
            self._integrate(dt)
            self.time = t_new
            self.steps += 1
            zi = <long long>(rnd(bg) * n)
            if zi == n:
                zi = n - 1
            z = self.occupied[zi]
            birth = rnd(bg) * self.per_occ < self.birth_dom
            ki = cum_search(cum, pk.n_k, rnd(bg))
            have_flip = False
            flip_val = 0
            if birth:
                x = z + pk.k_dx[ki]
                check_site(x, pk.d)
                if self.index.get(x) < 0 and pk.in_domain(x):
                    u5 = rnd(bg)
                    if self.t0v >= 0.0:
                        if u5 * (N + self.t0v) < N:
                            have_flip = True
                            flip_site = x
                            flip_val = 1
                        else:
                            x2 = x + pk.k_dx[cum_search(cum, pk.n_k, rnd(bg))]
                            if self.index.get(x2) >= 0:
                                have_flip = True
                                flip_site = x
                                flip_val = 1
                    else:
                        if u5 * N < N + self.t0v:
                            have_flip = True
                            flip_site = x
                            flip_val = 1
                        else:
                            x2 = x + pk.k_dx[cum_search(cum, pk.n_k, rnd(bg))]
                            if self.index.get(x2) < 0:
                                have_flip = True
                                flip_site = x
                                flip_val = 1
            else:
                x = z + pk.k_dx[ki]
                check_site(x, pk.d)
                if self.index.get(x) < 0:
                    u5 = rnd(bg)
                    if self.t1v >= 0.0:
                        if u5 * (N + self.t1v) < N:
                            have_flip = True
                            flip_site = z
                            flip_val = 0
                        else:
                            x2 = z + pk.k_dx[cum_search(cum, pk.n_k, rnd(bg))]
                            if self.index.get(x2) < 0:
                                have_flip = True
                                flip_site = z
                                flip_val = 0
                    else:
                        if u5 * N < N + self.t1v:
                            have_flip = True
                            flip_site = z
                            flip_val = 0
                        else:
                            x2 = z + pk.k_dx[cum_search(cum, pk.n_k, rnd(bg))]
                            if self.index.get(x2) >= 0:
                                have_flip = True
                                flip_site = z
                                flip_val = 0
            if have_flip:
                if self.record_log:
                    self.log_t.push_back(self.time)
                    self.log_site.push_back(flip_site)
                    self.log_val.push_back(<char> flip_val)
                self._set(flip_site, flip_val == 1)
                self.events += 1
        while gi < ng:
            mg[gi] = <long long> self.occupied.size()
            gi += 1
        self._integrate(t_end - self.time)
        self.time = t_end
        return self.result(mass_grid)

    def result(self, mass_grid):
        cdef vector[long long] occ_enc = self.occupied
        cpp_sort(occ_enc.begin(), occ_enc.end())
        finals = np.empty(occ_enc.size(), dtype=np.int64)
        cdef cnp.int64_t[:] fv = finals
        cdef size_t i
        for i in range(occ_enc.size()):
            fv[i] = occ_enc[i]
        lt = np.empty(self.log_t.size(), dtype=float)
        ls = np.empty(self.log_site.size(), dtype=np.int64)
        lv = np.empty(self.log_val.size(), dtype=np.int8)
        cdef double[:] ltv = lt
        cdef cnp.int64_t[:] lsv = ls
        cdef cnp.int8_t[:] lvv = lv
        for i in range(self.log_t.size()):
            ltv[i] = self.log_t[i]
            lsv[i] = self.log_site[i]
            lvv[i] = self.log_val[i]
        return {
            "time": self.time,
            "events": self.events,
            "steps": self.steps,
            "absorbed": self.absorbed,
            "n_occ": <long long> self.occupied.size(),
            "final_sites": _decode_array(finals, self.pk.d),
            "mass_grid": mass_grid,
            "int_mass": self.i_mass,
            "int_f0": self.i_f0,
            "int_vf1": self.i_vf1,
            "int_d2num": self.i_d2,
            "int_d3num": self.i_d3,
            "int_qv2num": self.i_qv2,
            "log_t": lt,
            "log_site": _decode_array(ls, self.pk.d),
            "log_val": lv,
        }


def run_thinning(pack, init_sites, rng, double t_end, grid,
                 long long max_steps, bint track_qv=False,
                 bint record_log=False):
    cdef PackC pk = make_pack(pack)
    init_enc = [encode_tuple(s, pk.d) for s in init_sites]
    cdef ThinC eng = ThinC(pk, init_enc, track_qv, record_log)
    return eng.drive(rng, t_end, grid, max_steps)


# -- coupled engine -----------------------------------------------------------


cdef class CoupledC:
    cdef PackC pk
    cdef _Map map
    cdef SumTreeC tree
    cdef vector[long long] slot_site
    cdef vector[int] ref
    cdef vector[char] occ0, occ1, occ2
    cdef vector[double] f1_0, f1_1, f1_2, fb1, pb, pd
    cdef vector[double] r0, r1, r2, lam
    cdef vector[int] free_list
    cdef vector[int] touched
    cdef long long n_occ[3]
    cdef double time
    cdef long long events, steps, dom_checks
    cdef bint absorbed
    cdef double vhat
    cdef double i_mass[3]

    def __cinit__(self, PackC pk, init_enc):
        if pk.N <= pk.k_delta:
            raise EngineError(
                "voter speed must exceed the domination certificate")
        self.pk = pk
        self.map = _Map(1024)
        self.tree = SumTreeC(256)
        self.n_occ[0] = self.n_occ[1] = self.n_occ[2] = 0
        self.time = 0.0
        self.events = 0
        self.steps = 0
        self.dom_checks = 0
        self.absorbed = False
        self.vhat = pk.N - pk.k_delta
        self.i_mass[0] = self.i_mass[1] = self.i_mass[2] = 0.0
        enc = sorted(init_enc)
        cdef long long e
        for e in enc:
            self.apply_flips(e, True, True, True, True)

    cdef int _alloc(self, long long site) except -1:
        cdef int slot
        if self.free_list.size() > 0:
            slot = self.free_list.back()
            self.free_list.pop_back()
            self.slot_site[slot] = site
            self.ref[slot] = 0
            self.occ0[slot] = 0
            self.occ1[slot] = 0
            self.occ2[slot] = 0
            self.f1_0[slot] = 0.0
            self.f1_1[slot] = 0.0
            self.f1_2[slot] = 0.0
            self.fb1[slot] = 0.0
            self.pb[slot] = 0.0
            self.pd[slot] = 0.0
            self.r0[slot] = 0.0
            self.r1[slot] = 0.0
            self.r2[slot] = 0.0
            self.lam[slot] = 0.0
        else:
            slot = <int> self.slot_site.size()
            self.slot_site.push_back(site)
            self.ref.push_back(0)
            self.occ0.push_back(0)
            self.occ1.push_back(0)
            self.occ2.push_back(0)
            self.f1_0.push_back(0.0)
            self.f1_1.push_back(0.0)
            self.f1_2.push_back(0.0)
            self.fb1.push_back(0.0)
            self.pb.push_back(0.0)
            self.pd.push_back(0.0)
            self.r0.push_back(0.0)
            self.r1.push_back(0.0)
            self.r2.push_back(0.0)
            self.lam.push_back(0.0)
            if slot >= self.tree.cap:
                self.tree.grow()
        self.map.put(site, slot)
        return slot

    cdef inline void _table_weights(self, long long site, double* bw,
                                    double* dw) noexcept:
        cdef double b_tot = 0.0, d_tot = 0.0
        cdef int i, j, s2
        cdef bint hit
        for i in range(self.pk.n_ent):
            hit = True
            for j in range(self.pk.ent_start[i], self.pk.ent_start[i + 1]):
                s2 = self.map.get(site + self.pk.ent_dx[j])
                if s2 < 0 or not self.occ0[s2]:
                    hit = False
                    break
            if hit:
                b_tot += self.pk.ent_beta[i]
                d_tot += self.pk.ent_delta[i]
        bw[0] = b_tot
        dw[0] = d_tot

    cdef int _recompute(self, int slot) except -1:
        cdef PackC pk = self.pk
        cdef double N = pk.N, vhat = self.vhat
        cdef double f1, f0, r0v, r1v, r2v, f1h, f1b, max_b, max_d, bw, dw
        if pk.kind == C_LV:
            f1 = self.f1_0[slot]
            if self.occ0[slot]:
                f0 = 1.0 - f1
                r0v = f0 * (N + pk.theta1 * f0)
            else:
                r0v = f1 * (N + pk.theta0 * f1)
        else:
            self._table_weights(self.slot_site[slot], &bw, &dw)
            self.pb[slot] = bw
            self.pd[slot] = dw
            f1 = self.f1_0[slot]
            if self.occ0[slot]:
                r0v = N * (1.0 - f1) + self.pd[slot] + pk.delta_empty
            else:
                r0v = N * f1 + self.pb[slot]
        if r0v < 0.0:
            if r0v < -pk.neg_tol:
                raise PositivityError(
                    f"negative flip rate {r0v!r} at site "
                    f"{decode_key(self.slot_site[slot], pk.d)}")
            r0v = 0.0
        f1h = self.f1_1[slot]
        r1v = vhat * (1.0 - f1h) if self.occ1[slot] else vhat * f1h
        f1b = self.f1_2[slot]
        if self.occ2[slot]:
            r2v = vhat * (1.0 - f1b)
        else:
            r2v = vhat * f1b + pk.c_bar * self.fb1[slot]
        self.r0[slot] = r0v
        self.r1[slot] = r1v
        self.r2[slot] = r2v
        max_b = 0.0
        max_d = 0.0
        if self.occ0[slot]:
            if r0v > max_d:
                max_d = r0v
        else:
            if r0v > max_b:
                max_b = r0v
        if self.occ1[slot]:
            if r1v > max_d:
                max_d = r1v
        else:
            if r1v > max_b:
                max_b = r1v
        if self.occ2[slot]:
            if r2v > max_d:
                max_d = r2v
        else:
            if r2v > max_b:
                max_b = r2v
        self.lam[slot] = max_b + max_d
        self.tree.set(slot, self.lam[slot])
        return 0

    cdef int apply_flips(self, long long y, bint f0v, bint f1v, bint f2v,
                         bint init) except -1:
        check_site(y, self.pk.d)
        cdef PackC pk = self.pk
        cdef int pi, k, slot, yslot
        cdef long long x
        cdef bint to_occ, flips_pi
        cdef int dr
        cdef char ov
        cdef double pkv
        cdef bint have_touched = False
        for pi in range(3):
            flips_pi = f0v if pi == 0 else (f1v if pi == 1 else f2v)
            if not flips_pi:
                continue
            if init:
                to_occ = True
            else:
                slot = self.map.get(y)
                if pi == 0:
                    to_occ = not self.occ0[slot]
                elif pi == 1:
                    to_occ = not self.occ1[slot]
                else:
                    to_occ = not self.occ2[slot]
            dr = 1 if to_occ else -1
            ov = 1 if to_occ else 0
            if not have_touched:
                self.touched.clear()
            for k in range(pk.n_act):
                x = y - pk.act_delta[k]
                slot = self.map.get(x)
                if slot < 0:
                    slot = self._alloc(x)
                self.ref[slot] += dr
                pkv = pk.act_p[k]
                if pkv != 0.0:
                    if pi == 0:
                        self.f1_0[slot] += dr * pkv
                    elif pi == 1:
                        self.f1_1[slot] += dr * pkv
                    else:
                        self.f1_2[slot] += dr * pkv
                if pi == 2:
                    pkv = pk.act_p2[k]
                    if pkv != 0.0:
                        self.fb1[slot] += dr * pkv
                if k == pk.origin_k:
                    if pi == 0:
                        self.occ0[slot] = ov
                    elif pi == 1:
                        self.occ1[slot] = ov
                    else:
                        self.occ2[slot] = ov
                    self.n_occ[pi] += dr
                if not have_touched:
                    self.touched.push_back(slot)
            have_touched = True
        if not have_touched:
            return 0
        cdef size_t ti
        for ti in range(self.touched.size()):
            slot = self.touched[ti]
            if self.ref[slot] == 0:
                self.map.erase(self.slot_site[slot])
                self.lam[slot] = 0.0
                self.r0[slot] = 0.0
                self.r1[slot] = 0.0
                self.r2[slot] = 0.0
                self.tree.set(slot, 0.0)
                self.free_list.push_back(slot)
                continue
            self._recompute(slot)
        yslot = self.map.get(y)
        if yslot >= 0:
            self.dom_checks += 1
            if (self.occ0[yslot] and not self.occ2[yslot]) or \
                    (self.occ1[yslot] and not self.occ2[yslot]):
                raise DominationError(
                    f"process ordering broken at site "
                    f"{decode_key(y, self.pk.d)}, t={self.time!r}")
        return 0

    def drive(self, object rng, double t_end, grid, long long max_steps):
        cdef bitgen_t* bg = get_bitgen(rng)
        cdef double[:] g = np.ascontiguousarray(grid, dtype=float)
        cdef long long ng = g.shape[0], gi = 0
        mass0 = np.zeros(ng, dtype=np.int64)
        mass1 = np.zeros(ng, dtype=np.int64)
        mass2 = np.zeros(ng, dtype=np.int64)
        cdef cnp.int64_t[:] m0 = mass0
        cdef cnp.int64_t[:] m1 = mass1
        cdef cnp.int64_t[:] m2 = mass2
        cdef double total, u1, dt, t_new, m, lamv, r
        cdef long long slot
        cdef int s, pi
        cdef bint hit0, hit1, hit2
        while gi < ng and g[gi] <= self.time:
            m0[gi] = self.n_occ[0]
            m1[gi] = self.n_occ[1]
            m2[gi] = self.n_occ[2]
            gi += 1
        while True:
            total = self.tree.total()
            if total <= 0.0:
                self.absorbed = True
                break
            u1 = rnd(bg)
            dt = -log1p(-u1) / total
            t_new = self.time + dt
            if t_new > t_end:
                break
            if self.steps >= max_steps:
                raise BudgetError(
                    f"event budget {max_steps} exceeded at t={self.time!r}")
            while gi < ng and g[gi] <= t_new:
                m0[gi] = self.n_occ[0]
                m1[gi] = self.n_occ[1]
                m2[gi] = self.n_occ[2]
                gi += 1
            for pi in range(3):
                self.i_mass[pi] += self.n_occ[pi] * dt
            self.time = t_new
            self.steps += 1
            slot = self.tree.select(rnd(bg))
            if self.lam[slot] <= 0.0 or self.ref[slot] == 0:
                for s in range(<int> self.slot_site.size()):
                    if self.ref[s] != 0 and self.lam[s] > 0.0:
                        slot = s
                        break
            lamv = self.lam[slot]
            m = rnd(bg) * lamv
            r = self.r0[slot]
            hit0 = (m >= lamv - r) if self.occ0[slot] else (m < r)
            r = self.r1[slot]
            hit1 = (m >= lamv - r) if self.occ1[slot] else (m < r)
            r = self.r2[slot]
            hit2 = (m >= lamv - r) if self.occ2[slot] else (m < r)
            if hit0 or hit1 or hit2:
                self.events += 1
                self.apply_flips(self.slot_site[slot], hit0, hit1, hit2,
                                 False)
        while gi < ng:
            m0[gi] = self.n_occ[0]
            m1[gi] = self.n_occ[1]
            m2[gi] = self.n_occ[2]
            gi += 1
        for pi in range(3):
            self.i_mass[pi] += self.n_occ[pi] * (t_end - self.time)
        self.time = t_end
        return self.result(mass0, mass1, mass2)

    def result(self, mass0, mass1, mass2):
        finals = []
        cdef vector[long long] occ_enc
        cdef int slot, pi
        cdef size_t i
        cdef cnp.int64_t[:] av
        for pi in range(3):
            occ_enc.clear()
            for slot in range(<int> self.slot_site.size()):
                if self.ref[slot] == 0:
                    continue
                if (pi == 0 and self.occ0[slot]) or \
                        (pi == 1 and self.occ1[slot]) or \
                        (pi == 2 and self.occ2[slot]):
                    occ_enc.push_back(self.slot_site[slot])
            cpp_sort(occ_enc.begin(), occ_enc.end())
            arr = np.empty(occ_enc.size(), dtype=np.int64)
            av = arr
            for i in range(occ_enc.size()):
                av[i] = occ_enc[i]
            finals.append(_decode_array(arr, self.pk.d))
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
            "mass_grid": mass0,
            "mass_grid_hat": mass1,
            "mass_grid_bar": mass2,
            "int_mass": self.i_mass[0],
            "int_mass_hat": self.i_mass[1],
            "int_mass_bar": self.i_mass[2],
        }


def run_coupled(pack, init_sites, rng, double t_end, grid,
                long long max_steps):
    cdef PackC pk = make_pack(pack)
    init_enc = [encode_tuple(s, pk.d) for s in init_sites]
    cdef CoupledC eng = CoupledC(pk, init_enc)
    return eng.drive(rng, t_end, grid, max_steps)


# -- coalescing random walks ---------------------------------------------


cdef struct WalkWatch:
    bint t12_set
    double t12
    bint t0_set
    double t0
    bint stop_when_decided


cdef inline void watch_reset(WalkWatch* w, bint stop_when_decided) noexcept nogil:
    w.t12_set = False
    w.t12 = 0.0
    w.t0_set = False
    w.t0 = 0.0
    w.stop_when_decided = stop_when_decided


cdef inline void note_merge(WalkWatch* w, unsigned long long mask,
                            double t) noexcept nogil:
    if not w.t12_set and (mask & 2) and (mask & 4):
        w.t12_set = True
        w.t12 = t
    if not w.t0_set and (mask & 1) and (mask & ~(<unsigned long long>1)):
        w.t0_set = True
        w.t0 = t


cdef double walk_system(vector[long long]* pos,
                        vector[unsigned long long]* masks,
                        double rate, double t_limit, bitgen_t* bg,
                        double* cum, long long* dx, int nk, int d,
                        WalkWatch* w, bint run_to_limit) except? -1.0:
    """Advance a coalescing system; twin of _core_py._walk_system with
    positions carried as encodes.  Returns the final time."""
    cdef size_t i = 0, j
    cdef long long newp
    cdef double t = 0.0, total, u1, dt
    cdef size_t ci, keep, drop
    # immediate coincidences merge at time 0, scanning ascending pairs
    while i < pos.size():
        j = i + 1
        while j < pos.size():
            if pos[0][i] == pos[0][j]:
                masks[0][i] = masks[0][i] | masks[0][j]
                pos.erase(pos.begin() + j)
                masks.erase(masks.begin() + j)
                note_merge(w, masks[0][i], 0.0)
            else:
                j += 1
        i += 1
    while pos.size() > 1 or (run_to_limit and pos.size() > 0):
        total = rate * pos.size()
        u1 = rnd(bg)
        dt = -log1p(-u1) / total
        if t + dt > t_limit:
            t = t_limit
            break
        t += dt
        ci = <size_t>(rnd(bg) * pos.size())
        if ci == pos.size():
            ci = pos.size() - 1
        newp = pos[0][ci] + dx[cum_search(cum, nk, rnd(bg))]
        if not fields_legal(newp, d):
            raise EngineError(
                f"site {decode_key(newp, d)} leaves the supported "
                f"coordinate range")
        pos[0][ci] = newp
        for j in range(pos.size()):
            if j != ci and pos[0][j] == newp:
                keep = ci if ci < j else j
                drop = j if ci < j else ci
                masks[0][keep] = masks[0][keep] | masks[0][drop]
                pos[0][keep] = newp
                pos.erase(pos.begin() + drop)
                masks.erase(masks.begin() + drop)
                note_merge(w, masks[0][keep], t)
                break
        if w.stop_when_decided and w.t0_set:
            break
    return t


cdef int _load_kernel(cum_arr, offs_arr, int d, vector[double]* cum,
                      vector[long long]* dx) except -1:
    cdef int k = len(cum_arr), i
    for i in range(k):
        cum.push_back(cum_arr[i])
        dx.push_back(delta_of(offs_arr[i], d))
    return 0


def walk_single(positions, double rate, double t_limit, rng, cum_arr,
                offs_arr, bint run_to_limit=False):
    """Public single-run advance used by the module-level system class."""
    cdef bitgen_t* bg = get_bitgen(rng)
    cdef int d = len(offs_arr[0])
    cdef vector[double] cum
    cdef vector[long long] dx
    _load_kernel(cum_arr, offs_arr, d, &cum, &dx)
    if len(positions) > 64:
        raise EngineError("compiled walk backend handles at most 64 walkers")
    cdef vector[long long] pos
    cdef vector[unsigned long long] masks
    cdef size_t i = 0
    for p in positions:
        pos.push_back(encode_tuple(tuple(p), d))
        masks.push_back(<unsigned long long>1 << i)
        i += 1
    cdef WalkWatch w
    watch_reset(&w, False)
    cdef double t = walk_system(&pos, &masks, rate, t_limit, bg, &cum[0],
                                &dx[0], <int> cum.size(), d, &w,
                                run_to_limit)
    out_pos = [decode_key(pos[i], d) for i in range(pos.size())]
    out_masks = [masks[i] for i in range(masks.size())]
    return out_pos, out_masks, t


def tau_leq_trials(positions, int d, cum_arr, offs_arr, double rate,
                   double horizon, long long reps, rng):
    """Count replicates whose full coalescence time is <= horizon."""
    cdef bitgen_t* bg = get_bitgen(rng)
    cdef vector[double] cum
    cdef vector[long long] dx
    _load_kernel(cum_arr, offs_arr, d, &cum, &dx)
    cdef vector[long long] base_enc
    for p in np.asarray(positions).reshape(-1, d):
        base_enc.push_back(encode_tuple(tuple(p), d))
    if base_enc.size() > 64:
        raise EngineError("compiled walk backend handles at most 64 walkers")
    cdef long long hits = 0, r
    cdef vector[long long] pos
    cdef vector[unsigned long long] masks
    cdef WalkWatch w
    cdef size_t i
    for r in range(reps):
        pos.clear()
        masks.clear()
        for i in range(base_enc.size()):
            pos.push_back(base_enc[i])
            masks.push_back(<unsigned long long>1 << i)
        watch_reset(&w, False)
        walk_system(&pos, &masks, rate, horizon, bg, &cum[0], &dx[0],
                    <int> cum.size(), d, &w, False)
        if pos.size() == 1:
            hits += 1
    return hits


def escape_ladder_trials(int d, cum_arr, offs_arr, double rate, horizons,
                         long long reps, rng, sep=None):
    """Two-walk escape counts at each horizon, common paths per replicate."""
    cdef bitgen_t* bg = get_bitgen(rng)
    cdef vector[double] cum
    cdef vector[long long] dx
    _load_kernel(cum_arr, offs_arr, d, &cum, &dx)
    cdef vector[double] hs
    for h in horizons:
        hs.push_back(h)
    cdef double hmax = hs[hs.size() - 1]
    cdef bint have_sep = sep is not None
    cdef long long sep_dx = 0
    if have_sep:
        sep_dx = delta_of(tuple(sep), d)
    origin = (0,) * d
    cdef long long o_enc = encode_tuple(origin, d)
    counts = np.zeros(hs.size(), dtype=np.int64)
    cdef cnp.int64_t[:] cv = counts
    cdef vector[long long] pos
    cdef vector[unsigned long long] masks
    cdef WalkWatch w
    cdef long long r, e_enc
    cdef double t
    cdef size_t j
    for r in range(reps):
        if have_sep:
            e_enc = o_enc + sep_dx
        else:
            e_enc = o_enc + dx[cum_search(&cum[0], <int> cum.size(), rnd(bg))]
        pos.clear()
        masks.clear()
        pos.push_back(o_enc)
        masks.push_back(1)
        pos.push_back(e_enc)
        masks.push_back(2)
        watch_reset(&w, False)
        t = walk_system(&pos, &masks, rate, hmax, bg, &cum[0], &dx[0],
                        <int> cum.size(), d, &w, False)
        for j in range(hs.size()):
            if pos.size() > 1 or t > hs[j]:
                cv[j] += 1
    return counts


def beta_delta_trials(int d, cum_arr, offs_arr, double rate, double horizon,
                      long long reps, rng, e1=None, e2=None):
    """(beta_hits, delta_hits) for the three-walk event pair."""
    cdef bitgen_t* bg = get_bitgen(rng)
    cdef vector[double] cum
    cdef vector[long long] dx
    _load_kernel(cum_arr, offs_arr, d, &cum, &dx)
    origin = (0,) * d
    cdef long long o_enc = encode_tuple(origin, d)
    cdef bint have1 = e1 is not None
    cdef bint have2 = e2 is not None
    cdef long long d1 = 0, d2 = 0
    if have1:
        d1 = delta_of(tuple(e1), d)
    if have2:
        d2 = delta_of(tuple(e2), d)
    cdef long long b_hits = 0, de_hits = 0, r
    cdef vector[long long] pos
    cdef vector[unsigned long long] masks
    cdef WalkWatch w
    cdef long long a1, a2
    for r in range(reps):
        if have1:
            a1 = o_enc + d1
        else:
            a1 = o_enc + dx[cum_search(&cum[0], <int> cum.size(), rnd(bg))]
        if have2:
            a2 = o_enc + d2
        else:
            a2 = o_enc + dx[cum_search(&cum[0], <int> cum.size(), rnd(bg))]
        pos.clear()
        masks.clear()
        pos.push_back(o_enc)
        masks.push_back(1)
        pos.push_back(a1)
        masks.push_back(2)
        pos.push_back(a2)
        masks.push_back(4)
        watch_reset(&w, True)
        walk_system(&pos, &masks, rate, horizon, bg, &cum[0], &dx[0],
                    <int> cum.size(), d, &w, False)
        if not w.t0_set:
            de_hits += 1
            if w.t12_set:
                b_hits += 1
    return b_hits, de_hits


def duality_trials(positions, int d, cum_arr, offs_arr, double rate,
                   double t_end, long long reps, rng, targets):
    """Count replicates whose surviving classes all sit in targets at t_end."""
    cdef bitgen_t* bg = get_bitgen(rng)
    cdef vector[double] cum
    cdef vector[long long] dx
    _load_kernel(cum_arr, offs_arr, d, &cum, &dx)
    cdef vector[long long] base_enc
    for p in np.asarray(positions).reshape(-1, d):
        base_enc.push_back(encode_tuple(tuple(p), d))
    if base_enc.size() > 64:
        raise EngineError("compiled walk backend handles at most 64 walkers")
    cdef unordered_set[long long] tset
    for tsite in targets:
        tset.insert(encode_tuple(tuple(tsite), d))
    cdef long long hits = 0, r
    cdef vector[long long] pos
    cdef vector[unsigned long long] masks
    cdef WalkWatch w
    cdef size_t i
    cdef bint allin
    for r in range(reps):
        pos.clear()
        masks.clear()
        for i in range(base_enc.size()):
            pos.push_back(base_enc[i])
            masks.push_back(<unsigned long long>1 << i)
        watch_reset(&w, False)
        walk_system(&pos, &masks, rate, t_end, bg, &cum[0], &dx[0],
                    <int> cum.size(), d, &w, True)
        allin = True
        for i in range(pos.size()):
            if tset.count(pos[i]) == 0:
                allin = False
                break
        if allin:
            hits += 1
    return hits
