"""Exact event-by-event simulation of the race, of whole liquidation episodes
and of synthetic order-flow streams.

The ask queue is split into ``P`` priority units ahead of the agent, the
agent's ``L`` units and ``G`` units queued behind them.  Market orders consume
the head of the queue; cancellations hit ``P`` and ``G`` units, the agent
never cancels.

Every episode (or race) reseeds numba's generator from ``(seed, index)`` so
batches are reproducible and independent of how they are split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import NonTermination
from .model import ASK, BID, DIRECTIONS, ModelParams, ReducedRaceKey, SystemState, dir_index

MAX_EPOCHS = 1_000_000


@njit(cache=True)
def _seed_for(seed, i):
    return (seed * 1_000_003 + i * 7919 + 12345) % 4294967291


@njit(cache=True)
def _race(kb, mb, tb, ka, ma, ta, B, P, L, t_limit, exec_times):
    """One race; returns ``(duration, direction, filled)``.

    ``direction`` is 0 when the race is still running at ``t_limit``, in which
    case ``filled`` counts the agent units filled by then.
    ``exec_times[:L]`` receives the fill times (``inf`` for unfilled units).
    """
    for i in range(L):
        exec_times[i] = np.inf
    G = 0
    filled = 0
    t = 0.0
    while True:
        r_bl = kb
        r_bm = mb
        r_bc = tb * B
        r_al = ka
        r_am = ma
        r_ac = ta * (P + G)
        total = r_bl + r_bm + r_bc + r_al + r_am + r_ac
        t += -math.log(1.0 - np.random.random()) / total
        if t > t_limit:
            return t_limit, 0, filled
        u = np.random.random() * total
        if u < r_bl:
            B += 1
        elif u < r_bl + r_bm + r_bc:
            B -= 1
            if B == 0:
                return t, -1, filled
        elif u < r_bl + r_bm + r_bc + r_al:
            G += 1
        elif u < r_bl + r_bm + r_bc + r_al + r_am:
            if P > 0:
                P -= 1
            elif L > 0:
                L -= 1
                exec_times[filled] = t
                filled += 1
            else:
                G -= 1
            if P + L + G == 0:
                return t, 1, filled
        else:
            if np.random.random() * (P + G) < P:
                P -= 1
            else:
                G -= 1
            if P + L + G == 0:
                return t, 1, filled


@njit(cache=True)
def _race_batch(kb, mb, tb, ka, ma, ta, B, P, L, t_limit, n, seed,
                dur, dirs, filled, exec_times):
    buf = np.empty(max(L, 1))
    for i in range(n):
        np.random.seed(_seed_for(seed, i))
        d, j, f = _race(kb, mb, tb, ka, ma, ta, B, P, L, t_limit, buf)
        dur[i] = d
        dirs[i] = j
        filled[i] = f
        for k in range(L):
            exec_times[i, k] = buf[k]


@dataclass(frozen=True)
class RaceOutcome:
    duration: float
    direction: int
    executed_limit: int
    exec_times: tuple = field(default=())

    def partial_at(self, lam: float) -> int:
        """Agent units filled by ``lam`` (meaningful when the race outlives ``lam``)."""
        return sum(1 for t in self.exec_times if t <= lam)


@dataclass(frozen=True, eq=False)
class RaceSample:
    """Batch of independent races with the same key."""

    duration: np.ndarray
    direction: np.ndarray
    executed: np.ndarray
    exec_times: np.ndarray

    def partial_at(self, lam: float) -> np.ndarray:
        return (self.exec_times <= lam).sum(axis=1)


def _race_rates(key: ReducedRaceKey, params: ModelParams):
    kb, mb, tb = params.side_rates(BID, key.j)
    ka, ma, ta = params.side_rates(ASK, key.j)
    return kb, mb, tb, ka, ma, ta


def simulate_races(key: ReducedRaceKey, params: ModelParams, n: int, seed: int = 0,
                   t_limit: float = np.inf) -> RaceSample:
    if key.m >= key.v_b:
        raise ValueError("the race needs m < v_b")
    dur = np.empty(n)
    dirs = np.empty(n, dtype=np.int64)
    filled = np.empty(n, dtype=np.int64)
    ex = np.empty((n, key.l))
    _race_batch(*_race_rates(key, params), key.bid_start, key.v_a, key.l, float(t_limit),
                n, seed, dur, dirs, filled, ex)
    return RaceSample(dur, dirs, filled, ex)


def simulate_race(key: ReducedRaceKey, params: ModelParams, rng_seed: int) -> RaceOutcome:
    s = simulate_races(key, params, 1, rng_seed)
    return RaceOutcome(float(s.duration[0]), int(s.direction[0]), int(s.executed[0]),
                       tuple(float(x) for x in s.exec_times[0]))


# --------------------------------------------------------------------------
# Episodes


@njit(cache=True)
def _draw_volume(cum, N):
    u = np.random.random() * cum[-1]
    k = np.searchsorted(cum, u, side="right")
    if k >= cum.size:
        k = cum.size - 1
    return k // N + 1, k % N + 1


@njit(cache=True)
def _episode(rates, cum_up, cum_down, N, pol_m, pol_l, lam_grid, rho, v_bar,
             j, vb, va, p, z, y, lam0, max_epochs, trace, tr):
    """Returns ``(wealth, epochs, status)``; status 1 flags a runaway episode."""
    wealth = 0.0
    lam = lam0
    K = lam_grid.size
    dl = lam_grid[1] - lam_grid[0] if K > 1 else 1.0
    buf = np.empty(max(y, 1) + 1)
    n = 0
    while True:
        if n >= max_epochs:
            return wealth, n, 1
        dj = 0 if j == 1 else 1
        if y == 0:
            m, l = 0, 0
        else:
            k = int(math.floor(lam / dl + 0.5)) if K > 1 else 0
            if k > K - 1:
                k = K - 1
            if k < 0:
                k = 0
            m = pol_m[dj, vb - 1, va - 1, y, k]
            l = pol_l[dj, vb - 1, va - 1, y, k]
        r = rho * (m * (p - 1) + z * (p - j))
        wealth += r
        if trace:
            tr[n, 0] = lam
            tr[n, 1] = j
            tr[n, 2] = vb
            tr[n, 3] = va
            tr[n, 4] = p
            tr[n, 5] = z
            tr[n, 6] = y
            tr[n, 7] = m
            tr[n, 8] = l
            tr[n, 9] = r
            tr[n, 10] = 0.0
        n += 1
        if y == 0:
            return wealth, n, 0
        kb = rates[1, dj, 0]
        mb = rates[1, dj, 1]
        tb = rates[1, dj, 2]
        ka = rates[0, dj, 0]
        ma = rates[0, dj, 1]
        ta = rates[0, dj, 2]
        d, jt, f = _race(kb, mb, tb, ka, ma, ta, vb - m, va, l, lam if lam > 0 else 0.0, buf)
        if jt == 0:
            rest = y - m
            w = rho * ((p - 1) * rest + f) - rho * (rest - f) / v_bar
            wealth += w
            if trace:
                tr[n - 1, 10] = w
                tr[n - 1, 11] = f
            return wealth, n, 0
        if trace:
            tr[n - 1, 11] = f
        lam -= d
        y = y - m - f
        z = f
        p += jt
        j = jt
        if jt == 1:
            vb, va = _draw_volume(cum_up, N)
        else:
            vb, va = _draw_volume(cum_down, N)


@njit(cache=True)
def _episode_batch(rates, cum_up, cum_down, N, pol_m, pol_l, lam_grid, rho, v_bar,
                   j, vb, va, p, z, y, lam0, n, seed, max_epochs, out_w, out_n):
    tr = np.empty((1, 12))
    for i in range(n):
        np.random.seed(_seed_for(seed, i))
        w, e, status = _episode(rates, cum_up, cum_down, N, pol_m, pol_l, lam_grid, rho, v_bar,
                                j, vb, va, p, z, y, lam0, max_epochs, False, tr)
        if status != 0:
            return i
        out_w[i] = w
        out_n[i] = e
    return -1


def _rates_array(params: ModelParams) -> np.ndarray:
    r = np.empty((2, 2, 3))
    for side in (ASK, BID):
        for j in DIRECTIONS:
            r[side, dir_index(j)] = params.side_rates(side, j)
    return r


def _policy_arrays(policy, params: ModelParams, chi: int, lam_grid=None):
    """``(m, l, lambda_grid)`` arrays from a Solution-like object or a callable."""
    if hasattr(policy, "m") and hasattr(policy, "l") and hasattr(policy, "lambda_grid"):
        return (np.ascontiguousarray(policy.m, dtype=np.int64),
                np.ascontiguousarray(policy.l, dtype=np.int64),
                np.asarray(policy.lambda_grid, dtype=float))
    if lam_grid is None:
        raise ValueError("a callable policy needs lam_grid")
    lam_grid = np.asarray(lam_grid, dtype=float)
    N = params.N
    shape = (2, N, N, chi + 1, lam_grid.size)
    m = np.zeros(shape, dtype=np.int64)
    l = np.zeros(shape, dtype=np.int64)
    for j in DIRECTIONS:
        for vb in range(1, N + 1):
            for va in range(1, N + 1):
                for y in range(chi + 1):
                    for k, lam in enumerate(lam_grid):
                        a = policy(j, vb, va, y, float(lam))
                        m[dir_index(j), vb - 1, va - 1, y, k] = a[0]
                        l[dir_index(j), vb - 1, va - 1, y, k] = a[1]
    return m, l, lam_grid


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    wealth: float
    n_epochs: int
    trace: list | None = None


TRACE_FIELDS = ("lambda", "j", "v_b", "v_a", "p", "z", "y", "m", "l", "reward", "terminal", "filled")


def simulate_episode(policy, initial: SystemState, lam0: float, params: ModelParams, chi: int,
                     rng_seed: int, lam_grid=None, trace: bool = False,
                     max_epochs: int = MAX_EPOCHS) -> EpisodeResult:
    """One liquidation episode; the policy is read at the nearest decision-grid node."""
    if initial.y > chi:
        raise ValueError("initial inventory exceeds chi")
    m, l, grid = _policy_arrays(policy, params, chi, lam_grid)
    cum_up = np.cumsum(params.vol_dist_up.ravel())
    cum_down = np.cumsum(params.vol_dist_down.ravel())
    cap = 100_000 if trace else 1
    tr = np.zeros((cap, 12))
    _seed_episode(rng_seed)
    w, n, status = _episode(_rates_array(params), cum_up, cum_down, params.N, m, l, grid,
                            params.rho, params.v_bar, initial.j, initial.v_b, initial.v_a,
                            initial.p, initial.z, initial.y, float(lam0),
                            min(max_epochs, cap) if trace else max_epochs, trace, tr)
    if status:
        raise NonTermination(f"episode exceeded {max_epochs} epochs")
    rows = None
    if trace:
        rows = [dict(zip(TRACE_FIELDS, row)) for row in tr[:n]]
        for row in rows:
            for k in ("j", "v_b", "v_a", "p", "z", "y", "m", "l", "filled"):
                row[k] = int(row[k])
    return EpisodeResult(float(w), int(n), rows)


@njit(cache=True)
def _seed_episode(seed):
    np.random.seed(_seed_for(seed, 0))


@dataclass(frozen=True, eq=False)
class EpisodeBatch:
    wealth: np.ndarray
    n_epochs: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.wealth.mean())

    @property
    def stderr(self) -> float:
        return float(self.wealth.std(ddof=1) / math.sqrt(self.wealth.size))


def simulate_episodes(policy, initial: SystemState, lam0: float, params: ModelParams, chi: int,
                      n: int, seed: int = 0, lam_grid=None,
                      max_epochs: int = MAX_EPOCHS) -> EpisodeBatch:
    """``n`` independent episodes; episode ``i`` matches ``simulate_episode(..., seed)`` for i=0."""
    m, l, grid = _policy_arrays(policy, params, chi, lam_grid)
    cum_up = np.cumsum(params.vol_dist_up.ravel())
    cum_down = np.cumsum(params.vol_dist_down.ravel())
    w = np.empty(n)
    e = np.empty(n, dtype=np.int64)
    bad = _episode_batch(_rates_array(params), cum_up, cum_down, params.N, m, l, grid, params.rho,
                         params.v_bar, initial.j, initial.v_b, initial.v_a, initial.p, initial.z,
                         initial.y, float(lam0), n, seed, max_epochs, w, e)
    if bad >= 0:
        raise NonTermination(f"episode {bad} exceeded {max_epochs} epochs")
    return EpisodeBatch(w, e)


# --------------------------------------------------------------------------
# Synthetic order flow

LIMIT, CANCEL, EXECUTION = 1, 3, 4


@njit(cache=True)
def _grow(a, need):
    if need <= a.shape[0]:
        return a
    b = np.empty((max(need, 2 * a.shape[0]), a.shape[1]), a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True)
def _emit(out, n, t, typ, oid, size, price, direction, ap, asz, bp, bsz):
    out = _grow(out, n + 1)
    out[n, 0] = t
    out[n, 1] = typ
    out[n, 2] = oid
    out[n, 3] = size
    out[n, 4] = price
    out[n, 5] = direction
    out[n, 6] = ap
    out[n, 7] = asz
    out[n, 8] = bp
    out[n, 9] = bsz
    return out, n + 1


@njit(cache=True)
def _queue_shares(q_sz, n):
    s = 0.0
    for i in range(n):
        s += q_sz[i]
    return s


@njit(cache=True)
def _size(S_l, jitter):
    if jitter <= 0:
        return S_l
    return max(1.0, math.floor(S_l * (1.0 + jitter * (2.0 * np.random.random() - 1.0)) + 0.5))


@njit(cache=True)
def _stream(rates, cum_up, cum_down, N, t0, duration, seed, S_l, jitter, tick, p0, vb0, va0,
            max_queue):
    np.random.seed(_seed_for(seed, 0))
    out = np.empty((1024, 10))
    n = 0
    starts = np.empty((256, 4))  # direction, start time, v_b, v_a
    n_races = 0
    qa_id = np.empty(max_queue, np.int64)
    qa_sz = np.empty(max_queue)
    qb_id = np.empty(max_queue, np.int64)
    qb_sz = np.empty(max_queue)
    na, nb = 0, 0
    next_id = 1
    ask = p0
    bid = p0 - 1
    for i in range(va0):
        qa_id[na] = next_id
        qa_sz[na] = _size(S_l, jitter)
        next_id += 1
        na += 1
    for i in range(vb0):
        qb_id[nb] = next_id
        qb_sz[nb] = _size(S_l, jitter)
        next_id += 1
        nb += 1
    t = t0
    j = 0  # direction of the race in progress; 0 for the initial one
    t_end = t0 + duration
    while True:
        dj = 0 if j >= 0 else 1
        kb, mb, tb = rates[1, dj, 0], rates[1, dj, 1], rates[1, dj, 2]
        ka, ma, ta = rates[0, dj, 0], rates[0, dj, 1], rates[0, dj, 2]
        total = kb + mb + tb * nb + ka + ma + ta * na
        t += -math.log(1.0 - np.random.random()) / total
        if t > t_end:
            break
        u = np.random.random() * total
        depleted = 0
        if u < kb:
            if nb >= max_queue:
                continue
            qb_id[nb] = next_id
            qb_sz[nb] = _size(S_l, jitter)
            out, n = _emit(out, n, t, LIMIT, next_id, qb_sz[nb], bid * tick, 1,
                           ask * tick, _queue_shares(qa_sz, na), bid * tick,
                           _queue_shares(qb_sz, nb + 1))
            next_id += 1
            nb += 1
            continue
        elif u < kb + mb + tb * nb:
            if u < kb + mb:
                k = 0
                typ = EXECUTION
            else:
                k = int(np.random.random() * nb)
                typ = CANCEL
            oid, sz = qb_id[k], qb_sz[k]
            for i in range(k, nb - 1):
                qb_id[i] = qb_id[i + 1]
                qb_sz[i] = qb_sz[i + 1]
            nb -= 1
            if nb == 0:
                depleted = -1
            else:
                out, n = _emit(out, n, t, typ, oid, sz, bid * tick, 1, ask * tick,
                               _queue_shares(qa_sz, na), bid * tick, _queue_shares(qb_sz, nb))
                continue
        elif u < kb + mb + tb * nb + ka:
            if na >= max_queue:
                continue
            qa_id[na] = next_id
            qa_sz[na] = _size(S_l, jitter)
            out, n = _emit(out, n, t, LIMIT, next_id, qa_sz[na], ask * tick, -1,
                           ask * tick, _queue_shares(qa_sz, na + 1), bid * tick,
                           _queue_shares(qb_sz, nb))
            next_id += 1
            na += 1
            continue
        else:
            if u < kb + mb + tb * nb + ka + ma:
                k = 0
                typ = EXECUTION
            else:
                k = int(np.random.random() * na)
                typ = CANCEL
            oid, sz = qa_id[k], qa_sz[k]
            for i in range(k, na - 1):
                qa_id[i] = qa_id[i + 1]
                qa_sz[i] = qa_sz[i + 1]
            na -= 1
            if na == 0:
                depleted = 1
            else:
                out, n = _emit(out, n, t, typ, oid, sz, ask * tick, -1, ask * tick,
                               _queue_shares(qa_sz, na), bid * tick, _queue_shares(qb_sz, nb))
                continue
        # a best queue emptied: the price moves one tick in direction `depleted`
        if depleted == 1:
            vb_new, va_new = _draw_volume(cum_up, N)
            # the next ask level becomes the best ask
            na = 0
            for i in range(va_new):
                qa_id[na] = next_id
                qa_sz[na] = _size(S_l, jitter)
                next_id += 1
                na += 1
            out, n = _emit(out, n, t, typ, oid, sz, ask * tick, -1, (ask + 1) * tick,
                           _queue_shares(qa_sz, na), bid * tick, _queue_shares(qb_sz, nb))
            ask += 1
            bid += 1
            nb = 0
            for i in range(vb_new):
                qb_id[nb] = next_id
                qb_sz[nb] = _size(S_l, jitter)
                nb += 1
                out, n = _emit(out, n, t, LIMIT, next_id, qb_sz[nb - 1], bid * tick, 1,
                               ask * tick, _queue_shares(qa_sz, na), bid * tick,
                               _queue_shares(qb_sz, nb))
                next_id += 1
        else:
            vb_new, va_new = _draw_volume(cum_down, N)
            nb = 0
            for i in range(vb_new):
                qb_id[nb] = next_id
                qb_sz[nb] = _size(S_l, jitter)
                next_id += 1
                nb += 1
            out, n = _emit(out, n, t, typ, oid, sz, bid * tick, 1, ask * tick,
                           _queue_shares(qa_sz, na), (bid - 1) * tick, _queue_shares(qb_sz, nb))
            ask -= 1
            bid -= 1
            na = 0
            for i in range(va_new):
                qa_id[na] = next_id
                qa_sz[na] = _size(S_l, jitter)
                na += 1
                out, n = _emit(out, n, t, LIMIT, next_id, qa_sz[na - 1], ask * tick, -1,
                               ask * tick, _queue_shares(qa_sz, na), bid * tick,
                               _queue_shares(qb_sz, nb))
                next_id += 1
        if n_races >= starts.shape[0]:
            starts = _grow(starts, n_races + 1)
        starts[n_races, 0] = depleted
        starts[n_races, 1] = t
        starts[n_races, 2] = vb_new
        starts[n_races, 3] = va_new
        n_races += 1
        j = depleted
    return out[:n], starts[:n_races]


@dataclass(frozen=True, eq=False)
class EventStream:
    """Synthetic message/order-book rows plus generator bookkeeping.

    ``messages`` columns: time, type, order_id, size, price, direction.
    ``book`` columns: ask_price, ask_size, bid_price, bid_size (after the event).
    ``race_starts`` columns: direction, start time, v_b, v_a; the last race
    is still open when the stream stops.
    """

    messages: np.ndarray
    book: np.ndarray
    race_starts: np.ndarray
    S_l: float
    tick: int

    @property
    def n_completed_races(self) -> int:
        return max(0, self.race_starts.shape[0] - 1)

    def write(self, message_path, orderbook_path) -> None:
        msg = self.messages
        with open(message_path, "w") as fh:
            for row in msg:
                fh.write(f"{row[0]:.9f},{int(row[1])},{int(row[2])},{int(row[3])},{int(row[4])},{int(row[5])}\n")
        with open(orderbook_path, "w") as fh:
            for row in self.book:
                fh.write(f"{int(row[0])},{int(row[1])},{int(row[2])},{int(row[3])}\n")


def generate_event_stream(params: ModelParams, duration: float, rng_seed: int, S_l: float = 200.0,
                          size_jitter: float = 0.0, start_time: float = 36000.0, tick: int = 100,
                          p0: int = 1000, max_queue: int = 10_000) -> EventStream:
    """Order flow at the best quotes obeying the model with no agent present.

    Every order is one unit of ``S_l`` shares (optionally jittered).  After a
    best queue empties, the opposite side's new best level and the new queue
    on the depleted side are drawn from the post-move volume law; the orders
    forming the new level are reported as limit arrivals at the race's
    starting timestamp.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    cum_up = np.cumsum(params.vol_dist_up.ravel())
    cum_down = np.cumsum(params.vol_dist_down.ravel())
    vb0 = 1 + int(np.argmax(params.vol_dist_up.sum(axis=1)))
    va0 = 1 + int(np.argmax(params.vol_dist_up.sum(axis=0)))
    rows, starts = _stream(_rates_array(params), cum_up, cum_down, params.N, float(start_time),
                           float(duration), int(rng_seed), float(S_l), float(size_jitter), int(tick),
                           int(p0), vb0, va0, int(max_queue))
    return EventStream(rows[:, :6].copy(), rows[:, 6:].copy(), starts, float(S_l), int(tick))


# --------------------------------------------------------------------------
# Kernel oracle


def check_kernel_tables(tables, n_keys: int = 20, draws: int = 100_000, seed: int = 0,
                        times=(1.0, 5.0, 20.0), m_max: int = 2, alpha: float = 0.0027,
                        keys=None) -> dict:
    """Compare tabulated kernel CDFs with simulated race frequencies.

    ``times`` must be stored table times.
    For each sampled key, time ``t`` and outcome ``(jt, zt)`` the statistic
    is ``(freq - table) / se`` with the binomial standard error at the table
    value.  The critical value is Bonferroni-adjusted over all comparisons
    so that the family-wise level matches a two-sided 3-sigma test.
    """
    from scipy.stats import norm

    from .kernel import outcomes

    params = tables.params
    rng = np.random.default_rng(seed)
    if keys is None:
        pool = list(tables.keys(m_max))
        keys = [pool[i] for i in rng.choice(len(pool), size=n_keys, replace=False)]
    t_tab = np.concatenate(([0.0], tables.t_tab))
    for t in times:
        if not np.any(np.isclose(t_tab, t, rtol=0, atol=1e-9)):
            raise ValueError(f"t={t} is not a stored table time")
    t_lim = float(max(times))
    rows = []
    for i, key in enumerate(keys):
        sample = simulate_races(key, params, draws, seed=int(rng.integers(2**31)) + i, t_limit=t_lim)
        for jt, zt in outcomes(key.l):
            q = np.concatenate(([0.0], tables.q_at(key, jt, zt)))
            hit = (sample.direction == jt) & (sample.executed == zt)
            for t in times:
                expect = float(np.interp(t, t_tab, q))
                freq = float(np.mean(hit & (sample.duration <= t)))
                se = math.sqrt(max(expect * (1 - expect), 1.0 / draws) / draws)
                rows.append(dict(key=list(key), t=float(t), jt=jt, zt=zt, table=expect, mc=freq,
                                 z=(freq - expect) / se))
    crit = float(norm.isf(alpha / (2 * len(rows))))
    worst = max(rows, key=lambda r: abs(r["z"]))
    failed = [r for r in rows if abs(r["z"]) > crit]
    return dict(draws=draws, n_keys=len(keys), comparisons=len(rows), critical_z=crit,
                passed=not failed, worst=worst, failed=failed, rows=rows)
