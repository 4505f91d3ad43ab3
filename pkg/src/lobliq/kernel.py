"""Semi-Markov and terminal kernels of the queueing race.

A race is identified by ``(j, v_b, v_a, m, l)``; only ``v_b - m`` matters, so
tables are indexed by the bid volume left after the market order.

Outcomes are ``(jt, zt)``: the direction of the next price move and the
number of the agent's limit units filled by then.  With ``F`` a CDF and
``Fbar = 1 - F`` the survival function, the kernel CDFs are

* ``l = 0``: ``Q(+1, 0) = int f_Ba Fbar_Bb``, ``Q(-1, 0) = int f_Bb Fbar_Ba``;
* ``l >= 1``: ``Q(+1, l) = int f_A Fbar_Bb``, ``Q(-1, 0) = int f_Bb Fbar_C1``,
  ``Q(-1, z) = int f_Bb (F_Cz - F_C(z+1))`` for ``0 < z < l`` and
  ``Q(-1, l) = int f_Bb (F_Cl - F_A)``.

Here ``Bb``/``Ba`` are the bid/ask ``B`` chains, ``Cz = C[v_a, z]`` is the
time until ``z`` of the agent's units have filled and ``A = A[v_a, l]`` the
ask-queue depletion time.  ``F_Cz - F_C(z+1)`` is the probability that
exactly ``z`` units have filled, since the next fill takes an independent
exponential time with the ask market-order rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import GridTooShort
from .fpt import (
    EulerParams,
    FptGrid,
    euler_invert,
    fpt_family_A,
    fpt_family_B,
    fpt_family_C,
    laplace_fpt_A,
    laplace_fpt_B,
    laplace_fpt_C,
    make_time_grid,
    mean_fpt_A,
    mean_fpt_B,
)
from .model import ASK, BID, DIRECTIONS, ModelParams, ReducedRaceKey, SystemState, dir_index

MASS_TOL = 5e-3


@dataclass(frozen=True)
class GridSpec:
    """Time discretisation shared by kernel tables and the solver.

    The decision grid has ``n_lambda`` points on ``[0, horizon]``.  The
    quadrature grid refines each decision step ``substeps`` times up to
    ``max(horizon, 20)`` and then grows geometrically up to ``t_max``.
    """

    horizon: float = 10.0
    n_lambda: int = 101
    substeps: int = 20
    ratio: float = 1.004
    t_max: float | None = None
    tail_factor: float = 12.0

    @property
    def d_lambda(self) -> float:
        return self.horizon / (self.n_lambda - 1)

    @property
    def dt(self) -> float:
        return self.d_lambda / self.substeps

    def lambda_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_lambda)

    def resolve_t_max(self, params: ModelParams, l_max: int) -> float:
        if self.t_max is not None:
            return float(self.t_max)
        return self.tail_factor * slowest_race_mean(params, l_max)

    def time_grid(self, params: ModelParams, l_max: int) -> np.ndarray:
        t_max = max(self.resolve_t_max(params, l_max), self.uniform_end + self.dt)
        return make_time_grid(self.uniform_end, self.dt, t_max, self.ratio)

    @property
    def uniform_end(self) -> float:
        n = int(math.ceil(max(self.horizon, 20.0) / self.dt - 1e-9))
        return n * self.dt


def slowest_race_mean(params: ModelParams, l_max: int) -> float:
    """Largest mean race length over keys, bounded by the faster side."""
    worst = 0.0
    N = params.N
    for j in DIRECTIONS:
        kb, mb, tb = params.side_rates(BID, j)
        ka, ma, ta = params.side_rates(ASK, j)
        bid = mean_fpt_B(N, kb, mb, tb)
        ask = mean_fpt_B(N, ka, ma, ta)
        if l_max >= 1:
            ask = max(ask, mean_fpt_A(N, l_max, ka, ma, ta))
        worst = max(worst, min(bid, ask))
    return worst


class FptCache:
    """First-passage grids for every process a race can involve.

    Families are built on first use; call :meth:`populate` before sharing the
    cache between threads.
    """

    def __init__(self, params: ModelParams, t_grid: np.ndarray, l_max: int,
                 v_max: int | None = None, euler: EulerParams = EulerParams()):
        self.params = params
        self.t_grid = np.asarray(t_grid, dtype=float)
        self.l_max = int(l_max)
        self.v_max = params.N if v_max is None else int(v_max)
        self.euler = euler
        self._store: dict = {}

    def _family(self, name, j, extra=0):
        key = (name, j, extra)
        if key not in self._store:
            kb, mb, tb = self.params.side_rates(BID, j)
            ka, ma, ta = self.params.side_rates(ASK, j)
            g, n = self.t_grid, self.v_max
            if name == "bid":
                fam = fpt_family_B(n, kb, mb, tb, g, self.euler)
            elif name == "ask":
                fam = fpt_family_B(n, ka, ma, ta, g, self.euler)
            elif name == "C":
                fam = fpt_family_C(n, extra, ma, ta, g, self.euler)
            else:
                fam = fpt_family_A(n, extra, ka, ma, ta, g, self.euler)
            self._store[key] = fam
        return self._store[key]

    def bid(self, j: int, v: int) -> FptGrid:
        return self._family("bid", j)[v - 1]

    def ask(self, j: int, v: int) -> FptGrid:
        return self._family("ask", j)[v - 1]

    def C(self, j: int, z: int, v: int) -> FptGrid:
        return self._family("C", j, z)[v - 1]

    def A(self, j: int, l: int, v: int) -> FptGrid:
        return self._family("A", j, l)[v - 1]

    def populate(self) -> "FptCache":
        for j in DIRECTIONS:
            self._family("bid", j)
            self._family("ask", j)
            for z in range(1, self.l_max + 1):
                self._family("C", j, z)
                self._family("A", j, z)
        return self


def _cumint(y, t):
    return cumulative_trapezoid(y, t, initial=0.0)


def outcomes(l: int) -> list[tuple[int, int]]:
    """Possible ``(jt, zt)`` for a posted size ``l``, in table order."""
    if l == 0:
        return [(1, 0), (-1, 0)]
    return [(1, l)] + [(-1, z) for z in range(l + 1)]


def race_cdfs(j: int, bid_start: int, v_a: int, l: int, cache: FptCache) -> dict:
    """Kernel CDFs of one race on ``cache.t_grid``, keyed by ``(jt, zt)``."""
    t = cache.t_grid
    fb = cache.bid(j, bid_start)
    sb = fb.survival
    out = {}
    if l == 0:
        fa = cache.ask(j, v_a)
        out[(1, 0)] = _cumint(fa.pdf * sb, t)
        out[(-1, 0)] = _cumint(fb.pdf * fa.survival, t)
        return out
    A = cache.A(j, l, v_a)
    C = [None] + [cache.C(j, z, v_a) for z in range(1, l + 1)]
    out[(1, l)] = _cumint(A.pdf * sb, t)
    out[(-1, 0)] = _cumint(fb.pdf * C[1].survival, t)
    for z in range(1, l):
        out[(-1, z)] = _cumint(fb.pdf * (C[z].cdf - C[z + 1].cdf), t)
    out[(-1, l)] = _cumint(fb.pdf * (C[l].cdf - A.cdf), t)
    return out


def terminal_probs(j: int, bid_start: int, v_a: int, l: int, cache: FptCache,
                   idx) -> np.ndarray:
    """``P(z | race, lambda)`` for ``z = 0..l`` at grid indices ``idx``."""
    idx = np.atleast_1d(idx)
    sb = cache.bid(j, bid_start).survival[idx]
    out = np.zeros((l + 1, idx.size))
    if l == 0:
        out[0] = sb * cache.ask(j, v_a).survival[idx]
        return out
    C = [None] + [cache.C(j, z, v_a).cdf[idx] for z in range(1, l + 1)]
    out[0] = sb * (1.0 - C[1])
    for z in range(1, l):
        out[z] = sb * (C[z] - C[z + 1])
    out[l] = sb * (C[l] - cache.A(j, l, v_a).cdf[idx])
    return out


def _survival_split(raw: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Terminal probabilities that sum to ``1 - Q(lambda)`` exactly.

    The survival mass comes from the stored race CDFs so that the terminal and
    continuation weights add up to one at every node; ``raw`` only sets the
    split over ``z``.
    """
    surv = np.clip(1.0 - q.sum(axis=(0, 1)), 0.0, 1.0)
    tot = raw.sum(axis=0)
    share = np.where(tot > 0, raw / np.where(tot > 0, tot, 1.0), 0.0)
    share[0] = np.where(tot > 0, share[0], 1.0)
    return share * surv


def _check_mass(total: float, key) -> None:
    if total < 1.0 - MASS_TOL:
        raise GridTooShort(
            f"race {key}: kernel mass {total:.5f} at t_max, extend the time grid"
        )


def reduced_kernel(key: ReducedRaceKey, params: ModelParams, grid: GridSpec | np.ndarray,
                   cache: FptCache | None = None,
                   euler: EulerParams = EulerParams()) -> tuple[np.ndarray, dict]:
    """Kernel CDFs for one race.

    ``grid`` is either a :class:`GridSpec` or an explicit time grid starting
    at 0.  Returns ``(t_grid, {(jt, zt): cdf})``; outcomes not listed have
    zero probability.
    """
    if key.m >= key.v_b or key.m < 0:
        raise ValueError("the race needs m < v_b")
    if cache is None:
        if isinstance(grid, GridSpec):
            t = grid.time_grid(params, key.l)
        else:
            t = np.asarray(grid, dtype=float)
        cache = FptCache(params, t, key.l, v_max=max(key.bid_start, key.v_a), euler=euler)
    cdfs = race_cdfs(key.j, key.bid_start, key.v_a, key.l, cache)
    _check_mass(sum(c[-1] for c in cdfs.values()), key)
    return cache.t_grid, cdfs


def _point_cdf(transform, lam: float, euler: EulerParams) -> float:
    _, _, cdf, _ = euler_invert(transform, [lam], euler, with_cdf=True)
    return float(min(max(cdf[0], 0.0), 1.0))


def terminal_kernel(key: ReducedRaceKey, lam: float, z: int, params: ModelParams,
                    euler: EulerParams = EulerParams()) -> float:
    """Probability that the race outlives ``lam`` with ``z`` limit units filled."""
    if lam <= 0:
        return 1.0 if z == 0 else 0.0
    if z < 0 or z > key.l:
        return 0.0
    j, vb, va, l = key.j, key.bid_start, key.v_a, key.l
    kb, mb, tb = params.side_rates(BID, j)
    ka, ma, ta = params.side_rates(ASK, j)
    sb = 1.0 - _point_cdf(lambda s: laplace_fpt_B(vb, kb, mb, tb, s), lam, euler)
    if l == 0:
        return sb * (1.0 - _point_cdf(lambda s: laplace_fpt_B(va, ka, ma, ta, s), lam, euler))
    Fc = lambda zz: _point_cdf(lambda s: laplace_fpt_C(va, zz, ma, ta, s), lam, euler)
    if z == 0:
        return sb * (1.0 - Fc(1))
    if z < l:
        return sb * max(Fc(z) - Fc(z + 1), 0.0)
    Fa = _point_cdf(lambda s: laplace_fpt_A(va, l, ka, ma, ta, s), lam, euler)
    return sb * max(Fc(l) - Fa, 0.0)


@dataclass(frozen=True, eq=False)
class KernelTables:
    """Precomputed kernel and terminal-kernel values for every race.

    ``q[dj, b-1, va-1, l, djt, zt, k]`` holds the kernel CDF at ``t_tab[k]``
    for direction index ``dj``, post-market-order bid volume ``b``, ask
    volume ``va``, posted size ``l`` and outcome ``(jt, zt)`` with
    ``djt = dir_index(jt)``.  The first ``len(lambda_grid)`` entries of
    ``t_tab`` are the decision grid.  ``p[dj, b-1, va-1, l, z, k]`` is the
    terminal kernel at ``lambda_grid[k]``.
    """

    params: ModelParams
    grid: GridSpec
    l_max: int
    t_tab: np.ndarray
    q: np.ndarray
    p: np.ndarray
    t_max: float
    min_mass: float
    cache: FptCache | None = field(default=None, repr=False)

    @property
    def lambda_grid(self) -> np.ndarray:
        return self.t_tab[: self.grid.n_lambda]

    @property
    def N(self) -> int:
        return self.params.N

    def q_at(self, key: ReducedRaceKey, jt: int, zt: int) -> np.ndarray:
        if zt < 0 or zt > key.l:
            return np.zeros(self.t_tab.size)
        return self.q[dir_index(key.j), key.bid_start - 1, key.v_a - 1, key.l, dir_index(jt), zt]

    def p_at(self, key: ReducedRaceKey, z: int) -> np.ndarray:
        if z < 0 or z > key.l:
            return np.zeros(self.grid.n_lambda)
        return self.p[dir_index(key.j), key.bid_start - 1, key.v_a - 1, key.l, z]

    def keys(self, m_max: int) -> Iterator[ReducedRaceKey]:
        N = self.N
        for j in DIRECTIONS:
            for vb in range(1, N + 1):
                for va in range(1, N + 1):
                    for m in range(0, min(m_max, vb - 1) + 1):
                        for l in range(self.l_max + 1):
                            yield ReducedRaceKey(j, vb, va, m, l)

    def save(self, path) -> None:
        np.savez_compressed(path, t_tab=self.t_tab, q=self.q, p=self.p,
                            grid=np.array([self.grid.horizon, self.grid.n_lambda, self.grid.substeps,
                                           self.grid.ratio, self.t_max, self.min_mass]))

    @classmethod
    def load(cls, path, params: ModelParams) -> "KernelTables":
        with np.load(path) as f:
            horizon, n_lambda, substeps, ratio, t_max, min_mass = f["grid"]
            q, p, t_tab = f["q"], f["p"], f["t_tab"]
        grid = GridSpec(horizon=float(horizon), n_lambda=int(n_lambda), substeps=int(substeps),
                        ratio=float(ratio), t_max=float(t_max))
        if q.shape[1] != params.N:
            raise ValueError("tables were built for a different volume truncation")
        return cls(params, grid, q.shape[3] - 1, t_tab, q, p, float(t_max), float(min_mass))


def report_times(grid: GridSpec, t_grid: np.ndarray) -> list[float]:
    extra = [20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0, 5000.0]
    out = [t for t in extra if grid.horizon < t < t_grid[-1]]
    out.append(float(t_grid[-1]))
    return out


def build_tables(params: ModelParams, m_max: int, l_max: int, grid: GridSpec = GridSpec(),
                 euler: EulerParams = EulerParams(), cache: FptCache | None = None,
                 keep_cache: bool = True) -> KernelTables:
    """Kernel tables for every race reachable with ``m <= m_max``, ``l <= l_max``.

    The tables depend on ``m`` only through ``v_b - m``, so every bid volume
    ``1..N`` is tabulated once.
    """
    N = params.N
    if cache is None:
        t_grid = grid.time_grid(params, l_max)
        cache = FptCache(params, t_grid, l_max, euler=euler).populate()
    t_grid = cache.t_grid
    lam_idx = np.arange(grid.n_lambda) * grid.substeps
    extra = report_times(grid, t_grid)
    extra_idx = [int(np.argmin(np.abs(t_grid - t))) for t in extra]
    idx = np.concatenate([lam_idx, extra_idx]).astype(int)
    t_tab = t_grid[idx]
    L = l_max + 1
    q = np.zeros((2, N, N, L, 2, L, idx.size))
    p = np.zeros((2, N, N, L, L, grid.n_lambda))
    min_mass = np.inf
    for j in DIRECTIONS:
        dj = dir_index(j)
        for b in range(1, N + 1):
            for va in range(1, N + 1):
                for l in range(L):
                    cdfs = race_cdfs(j, b, va, l, cache)
                    total = 0.0
                    for (jt, zt), cdf in cdfs.items():
                        q[dj, b - 1, va - 1, l, dir_index(jt), zt] = cdf[idx]
                        total += cdf[-1]
                    min_mass = min(min_mass, total)
                    _check_mass(total, ReducedRaceKey(j, b, va, 0, l))
                    p[dj, b - 1, va - 1, l, : l + 1] = _survival_split(
                        terminal_probs(j, b, va, l, cache, lam_idx),
                        q[dj, b - 1, va - 1, l, :, :, : grid.n_lambda])
    q.flags.writeable = False
    p.flags.writeable = False
    return KernelTables(params, grid, l_max, t_tab, q, p, float(t_grid[-1]), float(min_mass),
                        cache if keep_cache else None)


def full_kernel(e: SystemState, action, t: float, e_next: SystemState,
                params: ModelParams, tables: KernelTables) -> float:
    """Probability that the next epoch comes by ``t`` and lands in ``e_next``."""
    if e_next.p != e.p + e_next.j:
        return 0.0
    zt = e_next.z
    if e_next.y != e.y - action.m - zt:
        return 0.0
    key = ReducedRaceKey(e.j, e.v_b, e.v_a, action.m, action.l)
    if zt > key.l:
        return 0.0
    if t <= 0:
        return 0.0
    # linear between stored times, flat past the last one
    qv = np.interp(t, np.concatenate(([0.0], tables.t_tab)),
                   np.concatenate(([0.0], tables.q_at(key, e_next.j, zt))))
    vol = params.vol_dist(e_next.j)
    if e_next.v_b > params.N or e_next.v_a > params.N:
        return 0.0
    return float(qv * vol[e_next.v_b - 1, e_next.v_a - 1])
