"""Brute-force Bellman solver over full states ``(j, v_b, v_a, p, z, y)``.

Prices live on a window ``center +- half_width``; moves off the window are
clamped.  Paths that reach the edge within the horizon need many races in a
few seconds, so the clamp is invisible near the centre.
"""

import numpy as np

from lobliq.kernel import outcomes
from lobliq.model import Action, SystemState, dir_index, periodic_reward, terminal_reward


class DenseOracle:
    def __init__(self, params, tables, chi, m_max, l_max, center=40, half_width=20):
        self.params, self.tables, self.chi = params, tables, chi
        self.m_max, self.l_max = m_max, l_max
        self.prices = np.arange(center - half_width, center + half_width + 1)
        self.center = center
        self.N = params.N
        self.K = tables.grid.n_lambda
        self.shape = (2, self.N, self.N, chi + 1, chi + 1, self.prices.size, self.K)  # z before y

    def actions(self, vb, y):
        return [Action(m, l) for m in range(self.m_max + 1) for l in range(self.l_max + 1)
                if m < vb and m + l <= y]

    def _shift(self, arr, jt):
        # arr indexed by price; value at p + jt, clamped at the window edge
        out = np.roll(arr, -jt, axis=0)
        if jt == 1:
            out[-1] = arr[-1]
        else:
            out[0] = arr[0]
        return out

    def rhs(self, U, j, vb, va, z, y, a, k):
        """Right-hand side over the whole price window at level ``k``."""
        prm, tb = self.params, self.tables
        dj = dir_index(j)
        key_b = vb - a.m
        out = np.empty(self.prices.size)
        for i, p in enumerate(self.prices):
            e = SystemState(j, vb, va, int(p), z, y)
            val = periodic_reward(e, a, prm.rho)
            for zz in range(a.l + 1):
                val += terminal_reward(e, a, zz, prm.rho, prm.v_bar) * tb.p[dj, key_b - 1, va - 1, a.l, zz, k]
            out[i] = val
        for jt, zt in outcomes(a.l):
            Q = tb.q[dj, key_b - 1, va - 1, a.l, dir_index(jt), zt, : self.K]
            f = prm.vol_dist(jt)
            y_next = y - a.m - zt
            for n in range(k):
                dq = Q[n + 1] - Q[n]
                if dq == 0.0:
                    continue
                for lev in (k - n, k - n - 1):
                    W = np.einsum("ab,abp->p", f, U[dir_index(jt), :, :, zt, y_next, :, lev])
                    out += 0.5 * dq * self._shift(W, jt)
        return out

    def solve(self, inner_tol=1e-14):
        V = np.zeros(self.shape)
        for k in range(self.K):
            for _ in range(500):
                change = 0.0
                for j in (1, -1):
                    for vb in range(1, self.N + 1):
                        for va in range(1, self.N + 1):
                            for z in range(self.chi + 1):
                                for y in range(self.chi + 1):
                                    best = None
                                    for a in self.actions(vb, y):
                                        r = self.rhs(V, j, vb, va, z, y, a, k)
                                        best = r if best is None else np.maximum(best, r)
                                    idx = (dir_index(j), vb - 1, va - 1, z, y, slice(None), k)
                                    change = max(change, float(np.max(np.abs(best - V[idx]))))
                                    V[idx] = best
                if k == 0 or change < inner_tol:
                    break
        return V

    def value(self, V, j, vb, va, p, z, y, k):
        return float(V[dir_index(j), vb - 1, va - 1, z, y, p - self.prices[0], k])

    def lift(self, reduced):
        """Full-state table from a reduced one by the price/fill translation."""
        from lobliq.solver import translate_value
        from lobliq.model import P_REF
        U = np.zeros(self.shape)
        for j in (1, -1):
            dj = dir_index(j)
            for vb in range(self.N):
                for va in range(self.N):
                    for z in range(self.chi + 1):
                        for y in range(self.chi + 1):
                            for i, p in enumerate(self.prices):
                                U[dj, vb, va, z, y, i] = [
                                    translate_value(reduced[dj, vb, va, y, k], int(p), P_REF, z, 0, j, y,
                                                    self.params.rho) for k in range(self.K)]
        return U
