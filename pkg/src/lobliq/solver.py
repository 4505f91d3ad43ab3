"""Finite-horizon value iteration for the liquidation problem.

Values are stored for reduced states ``(j, v_b, v_a, y)`` at the reference
price ``P_REF`` with nothing filled from the previous race; any other
``(p, z)`` follows from :func:`translate_value`.

The kernel integral over the next epoch time is a Stieltjes sum over the
decision grid cells with the continuation value taken at the cell midpoint
(the average of the two neighbouring nodes).  Because the first cell refers
back to the current level, each level is solved as a small fixed point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import MaxIterations
from .kernel import KernelTables, outcomes
from .model import P_REF, Action, DIRECTIONS, ModelParams, ReducedRaceKey, SystemState, dir_index

MAX_POINT_UPDATES = 10_000_000


def translate_value(v_ref: float, p: int, p_ref: int, z: int, z_ref: int, j: int, y: int,
                    rho: float) -> float:
    """Value at ``(p, z)`` from the value of the same state at ``(p_ref, z_ref)``."""
    return v_ref + rho * (p - p_ref) * (y + z) + rho * (z - z_ref) * (p_ref - j)


def action_list(chi: int, m_max: int, l_max: int) -> list[Action]:
    return [Action(m, l) for m in range(m_max + 1) for l in range(l_max + 1) if m + l <= chi]


@dataclass(eq=False)
class _Problem:
    """Flattened Bellman data for every (state, action) pair."""

    params: ModelParams
    tables: KernelTables
    chi: int
    actions: list
    valid: np.ndarray      # (S, A)
    g0: np.ndarray         # (S, A, K): reward, terminal and translation terms
    term_sa: np.ndarray    # (T,) flat pair index s*A + a
    term_tgt: np.ndarray   # (T,) continuation series index dj*(chi+1) + y_next
    dq: np.ndarray         # (T, K-1) kernel mass per decision cell
    vol: np.ndarray        # (2, N, N)

    @property
    def shape(self):
        N = self.params.N
        return (2, N, N, self.chi + 1)

    @property
    def S(self) -> int:
        return int(np.prod(self.shape))

    @property
    def K(self) -> int:
        return self.tables.grid.n_lambda


def _build_problem(params: ModelParams, tables: KernelTables, chi: int, m_max: int,
                   l_max: int) -> _Problem:
    if l_max > tables.l_max:
        raise ValueError(f"tables cover l <= {tables.l_max}, asked for {l_max}")
    N, K, Y = params.N, tables.grid.n_lambda, chi + 1
    rho, vbar = params.rho, params.v_bar
    acts = action_list(chi, m_max, l_max)
    A = len(acts)
    S = 2 * N * N * Y
    valid = np.zeros((S, A), dtype=bool)
    g0 = np.full((S, A, K), -np.inf)
    term_sa, term_tgt, dq_rows = [], [], []
    s = 0
    for j in DIRECTIONS:
        dj = dir_index(j)
        for vb in range(1, N + 1):
            for va in range(1, N + 1):
                for y in range(Y):
                    for a, (m, l) in enumerate(acts):
                        if m > vb - 1 or m + l > y:
                            continue
                        valid[s, a] = True
                        b = vb - m
                        rest = y - m
                        z = np.arange(l + 1)
                        w = rho * ((P_REF - 1) * rest + z) - rho * (rest - z) / vbar
                        P = tables.p[dj, b - 1, va - 1, l, : l + 1]
                        row = rho * m * (P_REF - 1) + w @ P
                        for jt, zt in outcomes(l):
                            Q = tables.q[dj, b - 1, va - 1, l, dir_index(jt), zt, :K]
                            y_next = rest - zt
                            row = row + rho * (jt * y_next + zt * P_REF) * Q
                            term_sa.append(s * A + a)
                            term_tgt.append(dir_index(jt) * Y + y_next)
                            dq_rows.append(np.diff(Q))
                        g0[s, a] = row
                    s += 1
    vol = np.stack([params.vol_dist_up, params.vol_dist_down])
    return _Problem(params, tables, chi, acts, valid, g0, np.asarray(term_sa),
                    np.asarray(term_tgt), np.asarray(dq_rows), vol)


def _series(prob: _Problem, V: np.ndarray, k=slice(None)) -> np.ndarray:
    """Volume-averaged values ``W[dj*(chi+1) + y, k]``."""
    N, Y = prob.params.N, prob.chi + 1
    Vs = V.reshape(2, N, N, Y, -1)[..., k]
    W = np.einsum("dab,dabyk->dyk", prob.vol, Vs)
    return W.reshape(2 * Y, -1)


class _LevelSolver:
    """Evaluates the right-hand side of the Bellman equation level by level."""

    def __init__(self, prob: _Problem, V: np.ndarray):
        self.prob = prob
        self.V = V  # (S, K), updated in place
        self.W = _series(prob, V)

    def refresh_level(self, k: int) -> None:
        self.W[:, k] = _series(self.prob, self.V[:, k:k + 1])[:, 0]

    def known_part(self, k: int, W: np.ndarray | None = None) -> np.ndarray:
        """Continuation over cells 1..k-1 plus the lower half of cell 0."""
        prob = self.prob
        W = self.W if W is None else W
        T = prob.dq.shape[0]
        if k == 0:
            return np.zeros(T)
        mid = 0.5 * (W[:, 1:k] + W[:, : k - 1])  # mid[:, n] between nodes n, n+1
        out = 0.5 * prob.dq[:, 0] * W[prob.term_tgt, k - 1]
        if k >= 2:
            # cell i uses the midpoint between nodes k-i-1 and k-i
            M = prob.dq[:, 1:k] @ mid[:, ::-1].T  # (T, targets)
            out = out + M[np.arange(T), prob.term_tgt]
        return out

    def rhs(self, k: int, known: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
        """``(S, A)`` action values at level ``k``."""
        prob = self.prob
        W = self.W if W is None else W
        S, A = prob.valid.shape
        if k == 0:
            cont = np.zeros(S * A)
        else:
            self_part = 0.5 * prob.dq[:, 0] * W[prob.term_tgt, k]
            cont = np.bincount(prob.term_sa, weights=known + self_part, minlength=S * A)
        return prob.g0[:, :, k] + cont.reshape(S, A)


def _argmax_first(vals: np.ndarray):
    idx = np.argmax(vals, axis=1)
    return vals[np.arange(vals.shape[0]), idx], idx


def _project(V: np.ndarray, k: int, rows: np.ndarray | None = None) -> None:
    """Keep each row non-decreasing in ``k`` around the freshly written column."""
    col = V[:, k] if rows is None else V[rows, k]
    if rows is None:
        np.maximum(V[:, k + 1:], col[:, None], out=V[:, k + 1:])
        np.minimum(V[:, :k], col[:, None], out=V[:, :k])
    else:
        V[rows, k + 1:] = np.maximum(V[rows, k + 1:], col[:, None])
        V[rows, :k] = np.minimum(V[rows, :k], col[:, None])


@dataclass(eq=False)
class Solution:
    """Converged value table and policy for reduced states.

    ``value`` and the action arrays ``m``/``l`` have shape
    ``(2, N, N, chi + 1, n_lambda)`` indexed ``[dir_index(j), v_b-1, v_a-1, y, k]``.
    """

    lambda_grid: np.ndarray
    value: np.ndarray
    m: np.ndarray
    l: np.ndarray
    params: ModelParams
    chi: int
    m_max: int
    l_max: int
    meta: dict = field(default_factory=dict)
    tables: KernelTables | None = field(default=None, repr=False)

    def V(self, j: int, v_b: int, v_a: int, y: int, k: int) -> float:
        return float(self.value[dir_index(j), v_b - 1, v_a - 1, y, k])

    def action(self, j: int, v_b: int, v_a: int, y: int, k: int) -> Action:
        idx = (dir_index(j), v_b - 1, v_a - 1, y, k)
        return Action(int(self.m[idx]), int(self.l[idx]))

    def value_at(self, e: SystemState, lam: float) -> float:
        """Interpolated optimal value at a full state."""
        dj = dir_index(e.j)
        row = self.value[dj, e.v_b - 1, e.v_a - 1, e.y]
        v_ref = float(np.interp(lam, self.lambda_grid, row))
        return translate_value(v_ref, e.p, P_REF, e.z, 0, e.j, e.y, self.params.rho)

    def save(self, out_dir, header: dict | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta)
        meta.update(chi=self.chi, m_max=self.m_max, l_max=self.l_max,
                    horizon=float(self.lambda_grid[-1]), n_lambda=int(self.lambda_grid.size))
        if header:
            meta["provenance"] = header
        (out / "solution.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        self.params.to_json(out / "params.json")
        rows = []
        N = self.params.N
        for j in DIRECTIONS:
            dj = dir_index(j)
            for vb in range(1, N + 1):
                for va in range(1, N + 1):
                    for y in range(self.chi + 1):
                        for k, lam in enumerate(self.lambda_grid):
                            idx = (dj, vb - 1, va - 1, y, k)
                            rows.append(f"{j},{vb},{va},{y},{lam:.6g},{self.value[idx]:.12g},"
                                        f"{self.m[idx]},{self.l[idx]}")
        prefix = ""
        if header:
            prefix = "".join(f"# {k}: {v}\n" for k, v in sorted(header.items()))
        (out / "policy.csv").write_text(prefix + "j,v_b,v_a,y,lambda,value,m,l\n" + "\n".join(rows) + "\n")

    @classmethod
    def load(cls, in_dir) -> "Solution":
        src = Path(in_dir)
        meta = json.loads((src / "solution.json").read_text())
        params = ModelParams.from_json(src / "params.json")
        lines = [ln for ln in (src / "policy.csv").read_text().splitlines()
                 if ln and not ln.startswith("#")]
        data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
        N, chi, K = params.N, int(meta["chi"]), int(meta["n_lambda"])
        shape = (2, N, N, chi + 1, K)
        keep = {k: v for k, v in meta.items()
                if k not in ("chi", "m_max", "l_max", "horizon", "n_lambda")}
        return cls(np.linspace(0.0, meta["horizon"], K), data[:, 5].reshape(shape),
                   data[:, 6].astype(int).reshape(shape), data[:, 7].astype(int).reshape(shape),
                   params, chi, int(meta["m_max"]), int(meta["l_max"]), keep)


def initial_values(prob: _Problem) -> np.ndarray:
    """``rho (p - 1) y + lambda rho y / T`` at the reference price."""
    rho = prob.params.rho
    lam = prob.tables.lambda_grid
    T = lam[-1]
    y = np.broadcast_to(np.arange(prob.chi + 1), prob.shape).reshape(-1).astype(float)
    return rho * (P_REF - 1) * y[:, None] + rho * y[:, None] * lam[None, :] / T


@dataclass
class SolverConfig:
    tol: float = 1e-3
    gamma: float = 1.0
    sweep: str = "ordered"
    max_point_updates: int = MAX_POINT_UPDATES
    inner_tol_factor: float = 1e-4
    seed: int = 0
    monotone: bool = True


def _level_update(ls: _LevelSolver, k: int, cfg: SolverConfig, counter: list,
                  choose: np.ndarray | None = None):
    """Solve level ``k`` against the current table; returns the chosen action indices."""
    prob = ls.prob
    known = ls.known_part(k)
    inner_tol = cfg.tol * cfg.inner_tol_factor
    idx = None
    for _ in range(200):
        vals = ls.rhs(k, known)
        if choose is None:
            vals = np.where(prob.valid, vals, -np.inf)
            new, idx = _argmax_first(vals)
        else:
            idx = choose[:, k]
            new = vals[np.arange(vals.shape[0]), idx]
        new = cfg.gamma * new + (1.0 - cfg.gamma) * ls.V[:, k]
        change = float(np.max(np.abs(new - ls.V[:, k])))
        ls.V[:, k] = new
        ls.refresh_level(k)
        counter[0] += new.size
        if counter[0] > cfg.max_point_updates:
            raise MaxIterations(f"exceeded {cfg.max_point_updates} point updates")
        if k == 0 or change <= inner_tol:
            break
    return idx


def bellman_operator(prob: _Problem, V: np.ndarray, choose: np.ndarray | None = None):
    """One Jacobi application: ``(new values, action indices)``, both ``(S, K)``."""
    ls = _LevelSolver(prob, V.copy())
    K = prob.K
    out = np.empty_like(V)
    act = np.empty(V.shape, dtype=int)
    for k in range(K):
        vals = ls.rhs(k, ls.known_part(k))
        if choose is None:
            vals = np.where(prob.valid, vals, -np.inf)
            out[:, k], act[:, k] = _argmax_first(vals)
        else:
            act[:, k] = choose[:, k]
            out[:, k] = vals[np.arange(vals.shape[0]), choose[:, k]]
    return out, act


def _ordered_iteration(prob, V, cfg, choose=None):
    counter = [0]
    ls = _LevelSolver(prob, V)
    K = prob.K
    sweeps = 0
    act = np.zeros(V.shape, dtype=int)
    while True:
        before = ls.V.copy()
        for k in range(K):
            act[:, k] = _level_update(ls, k, cfg, counter, choose)
            if cfg.monotone:
                _project(ls.V, k)
                ls.W = _series(prob, ls.V)
        sweeps += 1
        change = float(np.max(np.abs(ls.V - before)))
        if change <= cfg.tol:
            return ls.V, sweeps, counter[0], change


def _random_iteration(prob, V, cfg, choose=None):
    """Asynchronous updates of single (state, level) pairs in random order."""
    rng = np.random.default_rng(cfg.seed)
    S, K = V.shape
    counter = 0
    sweeps = 0
    A = prob.valid.shape[1]
    by_state = [[] for _ in range(S)]
    for t, sa in enumerate(prob.term_sa):
        by_state[sa // A].append(t)
    by_state = [np.asarray(x, dtype=int) for x in by_state]
    W = _series(prob, V)
    N, Y = prob.params.N, prob.chi + 1
    vol_of = prob.vol.reshape(2, -1)
    while True:
        before = V.copy()
        for flat in rng.permutation(S * K):
            s, k = divmod(int(flat), K)
            terms = by_state[s]
            vals = prob.g0[s, :, k].copy()
            if k > 0 and terms.size:
                tg = prob.term_tgt[terms]
                dq = prob.dq[terms, :k]
                mids = 0.5 * (W[tg, 1:k + 1] + W[tg, :k])[:, ::-1]
                cont = np.einsum("ti,ti->t", dq, mids)
                vals += np.bincount(prob.term_sa[terms] - s * A, weights=cont, minlength=A)
            if choose is None:
                vals = np.where(prob.valid[s], vals, -np.inf)
                new = vals[int(np.argmax(vals))]
            else:
                new = vals[choose[s, k]]
            new = cfg.gamma * new + (1.0 - cfg.gamma) * V[s, k]
            old_row = V[s].copy()
            V[s, k] = new
            if cfg.monotone:
                _project(V, k, np.array([s]))
            delta = V[s] - old_row
            if np.any(delta):
                dj, rem = divmod(s, N * N * Y)
                ab, y = divmod(rem, Y)
                W[dj * Y + y] += vol_of[dj, ab] * delta
            counter += 1
            if counter > cfg.max_point_updates:
                raise MaxIterations(f"exceeded {cfg.max_point_updates} point updates")
        sweeps += 1
        change = float(np.max(np.abs(V - before)))
        if change <= cfg.tol:
            return V, sweeps, counter, change


def _run(prob: _Problem, cfg: SolverConfig, choose=None, V0=None):
    if not (0 < cfg.gamma <= 1):
        raise ValueError("gamma must lie in (0, 1]")
    if cfg.tol <= 0:
        raise ValueError("tol must be positive")
    V = initial_values(prob) if V0 is None else V0.copy()
    if cfg.sweep == "ordered":
        V, sweeps, updates, change = _ordered_iteration(prob, V, cfg, choose)
    elif cfg.sweep == "random":
        V, sweeps, updates, change = _random_iteration(prob, V, cfg, choose)
    else:
        raise ValueError(f"unknown sweep mode {cfg.sweep!r}")
    TV, act = bellman_operator(prob, V, choose)
    residual = float(np.max(np.abs(TV - V)))
    meta = dict(sweeps=sweeps, point_updates=updates, last_change=change, residual=residual,
                tol=cfg.tol, gamma=cfg.gamma, sweep=cfg.sweep)
    return V, act, meta


def value_iteration(params: ModelParams, tables: KernelTables, chi: int, T: float | None = None,
                    tol: float = 1e-3, gamma: float = 1.0, sweep: str = "ordered",
                    m_max: int | None = None, l_max: int | None = None,
                    max_point_updates: int = MAX_POINT_UPDATES, seed: int = 0,
                    monotone: bool = True) -> Solution:
    """Optimal values and policy on the tables' decision grid."""
    if T is not None and not math.isclose(T, tables.grid.horizon):
        raise ValueError(f"tables were built for horizon {tables.grid.horizon}, not {T}")
    m_max = chi if m_max is None else m_max
    l_max = chi if l_max is None else l_max
    prob = _build_problem(params, tables, chi, m_max, l_max)
    cfg = SolverConfig(tol=tol, gamma=gamma, sweep=sweep, max_point_updates=max_point_updates,
                       seed=seed, monotone=monotone)
    V, act, meta = _run(prob, cfg)
    acts = np.asarray(prob.actions)
    shape = prob.shape + (prob.K,)
    return Solution(tables.lambda_grid.copy(), V.reshape(shape), acts[act, 0].reshape(shape),
                    acts[act, 1].reshape(shape), params, chi, m_max, l_max, meta, tables)


def bellman_update(value: np.ndarray, params: ModelParams, tables: KernelTables, chi: int,
                   m_max: int | None = None, l_max: int | None = None):
    """One synchronous application of the optimality operator to a reduced table.

    Returns ``(new_value, m, l)`` laid out like :class:`Solution` arrays.
    """
    m_max = chi if m_max is None else m_max
    l_max = chi if l_max is None else l_max
    prob = _build_problem(params, tables, chi, m_max, l_max)
    shape = prob.shape + (prob.K,)
    TV, act = bellman_operator(prob, np.asarray(value, dtype=float).reshape(prob.S, prob.K))
    acts = np.asarray(prob.actions)
    return TV.reshape(shape), acts[act, 0].reshape(shape), acts[act, 1].reshape(shape)


def bellman_residual(solution: Solution) -> float:
    """Sup-norm distance between a solution's values and their Bellman image."""
    if solution.tables is None:
        raise ValueError("the solution carries no kernel tables")
    TV, _, _ = bellman_update(solution.value, solution.params, solution.tables, solution.chi,
                              solution.m_max, solution.l_max)
    return float(np.max(np.abs(TV - solution.value)))


PolicyFn = Callable[[int, int, int, int, float], Action]


def _policy_indices(prob: _Problem, policy) -> np.ndarray:
    """Action index per (state, level) from a callable or an ``(m, l)`` array pair."""
    S, K = prob.S, prob.K
    lookup = {a: i for i, a in enumerate(prob.actions)}
    N, Y = prob.params.N, prob.chi + 1
    out = np.empty((S, K), dtype=int)
    lam = prob.tables.lambda_grid
    s = 0
    for j in DIRECTIONS:
        for vb in range(1, N + 1):
            for va in range(1, N + 1):
                for y in range(Y):
                    for k in range(K):
                        if callable(policy):
                            a = Action(*policy(j, vb, va, y, float(lam[k])))
                        else:
                            m_arr, l_arr = policy
                            idx = (dir_index(j), vb - 1, va - 1, y, k)
                            a = Action(int(m_arr[idx]), int(l_arr[idx]))
                        i = lookup.get(a)
                        if i is None or not prob.valid[s, i]:
                            raise ValueError(f"policy picks inadmissible {a} at j={j}, v_b={vb}, y={y}")
                        out[s, k] = i
                    s += 1
    return out


def evaluate_policy_value(policy, params: ModelParams, tables: KernelTables, chi: int,
                          tol: float = 1e-3, m_max: int | None = None,
                          l_max: int | None = None) -> np.ndarray:
    """Value of a fixed decision rule, shape ``(2, N, N, chi + 1, n_lambda)``.

    ``policy`` is either ``f(j, v_b, v_a, y, lam) -> (m, l)`` or a pair of
    integer arrays ``(m, l)`` laid out like :class:`Solution` tables.
    """
    m_max = chi if m_max is None else m_max
    l_max = chi if l_max is None else l_max
    prob = _build_problem(params, tables, chi, m_max, l_max)
    choose = _policy_indices(prob, policy)
    V, _, meta = _run(prob, SolverConfig(tol=tol, monotone=False), choose)
    return V.reshape(prob.shape + (prob.K,))


def baseline_policy(name: str, m_max: int, l_max: int) -> PolicyFn:
    """Reference rules: ``do_nothing``, ``max_market`` and ``max_limit``."""
    if name == "do_nothing":
        return lambda j, vb, va, y, lam: Action(0, 0)
    if name == "max_market":
        return lambda j, vb, va, y, lam: Action(min(m_max, vb - 1, y), 0)
    if name == "max_limit":
        return lambda j, vb, va, y, lam: Action(0, min(l_max, y))
    raise ValueError(f"unknown baseline {name!r}")


def _lam_index(tables: KernelTables, lam: float):
    grid = tables.lambda_grid
    if lam < -1e-12 or lam > grid[-1] + 1e-9:
        raise ValueError(f"lambda={lam} outside [0, {grid[-1]}]")
    x = np.interp(lam, grid, np.arange(grid.size))
    k0 = int(math.floor(x + 1e-9))
    k0 = min(k0, grid.size - 1)
    frac = x - k0
    if frac < 1e-9:
        frac = 0.0
    return k0, frac


def _rhs_at_node(u: np.ndarray, e: SystemState, k: int, a: Action, tables: KernelTables,
                 params: ModelParams) -> float:
    rho, vbar = params.rho, params.v_bar
    dj = dir_index(e.j)
    key = ReducedRaceKey(e.j, e.v_b, e.v_a, a.m, a.l)
    b = key.bid_start
    rest = e.y - a.m
    total = rho * (a.m * (e.p - 1) + e.z * (e.p - e.j))
    P = tables.p[dj, b - 1, e.v_a - 1, a.l, : a.l + 1, k]
    for z in range(a.l + 1):
        w = rho * ((e.p - 1) * rest + z) - rho * (rest - z) / vbar
        total += w * P[z]
    if k == 0:
        return float(total)
    K = tables.grid.n_lambda
    for jt, zt in outcomes(a.l):
        Q = tables.q[dj, b - 1, e.v_a - 1, a.l, dir_index(jt), zt, :K]
        dq = np.diff(Q[: k + 1])
        y_next = rest - zt
        W = np.einsum("ab,abk->k", params.vol_dist(jt), u[dir_index(jt), :, :, y_next, : k + 1])
        mids = 0.5 * (W[1:] + W[:-1])  # midpoint between nodes n and n+1
        cont = float(dq @ mids[::-1])
        shift = rho * (e.p + jt - P_REF) * (y_next + zt) + rho * zt * (P_REF - jt)
        total += cont + shift * Q[k]
    return float(total)


def bellman_rhs(u: np.ndarray, e: SystemState, lam: float, a: Action, tables: KernelTables,
                params: ModelParams) -> float:
    """Reward plus expected terminal payoff plus expected continuation value.

    ``u`` is a reduced value table laid out like :attr:`Solution.value`.
    Between decision-grid nodes the result is interpolated linearly.
    """
    if a.m >= e.v_b or a.m + a.l > e.y:
        raise ValueError(f"{a} is not admissible at {e}")
    k, frac = _lam_index(tables, lam)
    out = _rhs_at_node(u, e, k, a, tables, params)
    if frac:
        out = (1 - frac) * out + frac * _rhs_at_node(u, e, k + 1, a, tables, params)
    return out


def extract_policy(solution: Solution, e: SystemState, lam: float) -> Action:
    """Greedy action against the solution's values; ties go to the smallest ``(m, l)``."""
    if solution.tables is None:
        raise ValueError("the solution carries no kernel tables")
    best, best_val = None, -np.inf
    for a in action_list(solution.chi, solution.m_max, solution.l_max):
        if a.m >= e.v_b or a.m + a.l > e.y:
            continue
        val = bellman_rhs(solution.value, e, lam, a, solution.tables, solution.params)
        if val > best_val:
            best, best_val = a, val
    return best
