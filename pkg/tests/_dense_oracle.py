"""Dense full-box Gillespie reference, independent of the package engines.

Every rate is recomputed from scratch at every event by scanning the
whole box; nothing is cached, no active set is kept, and site selection
walks the box in lexicographic order.  Input data (kernel offsets and
probabilities, perturbation entries) is shared with the engine under
test, the algorithm is not.
"""

from math import log1p

import numpy as np


class DenseGillespie:
    """Exact simulator on an inclusive box [lo, hi]^d.

    ``model`` is "voter", ("lv", theta0, theta1),
    ("biased", v, b, bias_offsets, bias_probs), or a mapping
    {offsets-tuple: (beta, delta)} with the empty key allowed.
    Sites outside the box never flip, matching the engines' domain rule.
    """

    def __init__(self, kernel, model, init, N, lo, hi):
        self.d = kernel.d
        self.N = float(N)
        self.offs = [tuple(int(c) for c in o) for o in kernel.offsets_array()]
        self.probs = [float(p) for p in kernel.probs]
        lo = tuple(int(c) for c in np.broadcast_to(lo, (self.d,)))
        hi = tuple(int(c) for c in np.broadcast_to(hi, (self.d,)))
        axes = [range(a, b + 1) for a, b in zip(lo, hi)]
        self.sites = sorted(self._product(axes))
        self.index = {s: i for i, s in enumerate(self.sites)}
        self.occ = np.zeros(len(self.sites), dtype=bool)
        for s in init:
            self.occ[self.index[tuple(int(c) for c in s)]] = True
        self.model = model
        if isinstance(model, dict):
            self.entries = sorted(model.items())
        elif getattr(model, "entries", None) is not None:
            self.entries = sorted(model.entries.items())
        else:
            self.entries = None
        self.time = 0.0
        self.events = 0

    @staticmethod
    def _product(axes):
        out = [()]
        for ax in axes:
            out = [p + (v,) for p in out for v in ax]
        return out

    def _occupied(self, site):
        i = self.index.get(site)
        return bool(self.occ[i]) if i is not None else False

    def _f1(self, site):
        total = 0.0
        for off, p in zip(self.offs, self.probs):
            if self._occupied(tuple(a + b for a, b in zip(site, off))):
                total += p
        return total

    def _chi_sums(self, site):
        b_tot = d_tot = 0.0
        for key, (beta, delta) in self.entries:
            hit = True
            for off in key:
                if not self._occupied(tuple(a + b
                                            for a, b in zip(site, off))):
                    hit = False
                    break
            if hit:
                b_tot += beta
                d_tot += delta
        return b_tot, d_tot

    def _rate(self, i):
        site = self.sites[i]
        f1 = self._f1(site)
        m = self.model
        if self.occ[i]:
            f0 = 1.0 - f1
            if isinstance(m, tuple) and m[0] == "lv":
                return f0 * (self.N + m[2] * f0)
            if isinstance(m, tuple) and m[0] == "biased":
                return m[1] * f0
            if self.entries is not None:
                return self.N * f0 + self._chi_sums(site)[1]
            return self.N * f0
        if isinstance(m, tuple) and m[0] == "lv":
            return f1 * (self.N + m[1] * f1)
        if isinstance(m, tuple) and m[0] == "biased":
            _, v, b, b_offs, b_probs = m
            fb1 = 0.0
            for off, p in zip(b_offs, b_probs):
                if self._occupied(tuple(a + c for a, c in zip(site, off))):
                    fb1 += p
            return v * f1 + b * fb1
        if self.entries is not None:
            return self.N * f1 + self._chi_sums(site)[0]
        return self.N * f1

    def run(self, rng, t_end, grid=(), max_steps=10 ** 7):
        grid = list(grid)
        gi = 0
        mass_grid = [0] * len(grid)
        log_t, log_site, log_val = [], [], []
        n_occ = int(self.occ.sum())
        while gi < len(grid) and grid[gi] <= self.time:
            mass_grid[gi] = n_occ
            gi += 1
        while self.events < max_steps:
            rates = [self._rate(i) for i in range(len(self.sites))]
            total = 0.0
            for r in rates:
                if r > 0.0:
                    total += r
            if total <= 0.0:
                break
            u1 = rng.random()
            t_new = self.time + (-log1p(-u1) / total)
            if t_new > t_end:
                break
            while gi < len(grid) and grid[gi] <= t_new:
                mass_grid[gi] = n_occ
                gi += 1
            self.time = t_new
            target = rng.random() * total
            acc = 0.0
            chosen = None
            for i, r in enumerate(rates):
                if r > 0.0:
                    acc += r
                    if target < acc:
                        chosen = i
                        break
            if chosen is None:
                chosen = max(i for i, r in enumerate(rates) if r > 0.0)
            self.occ[chosen] = not self.occ[chosen]
            n_occ += 1 if self.occ[chosen] else -1
            self.events += 1
            log_t.append(self.time)
            log_site.append(self.sites[chosen])
            log_val.append(1 if self.occ[chosen] else 0)
        while gi < len(grid):
            mass_grid[gi] = n_occ
            gi += 1
        self.time = t_end
        final = [s for i, s in enumerate(self.sites) if self.occ[i]]
        return {
            "events": self.events,
            "final_sites": np.array(final, dtype=np.int64).reshape(
                len(final), self.d),
            "mass_grid": np.array(mass_grid, dtype=np.int64),
            "log_t": np.array(log_t, dtype=float),
            "log_site": np.array(log_site, dtype=np.int64).reshape(
                len(log_site), self.d),
            "log_val": np.array(log_val, dtype=np.int8),
        }
