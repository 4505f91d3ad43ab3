import math

import numpy as np
import pytest

from lobliq.errors import GridTooShort
from lobliq.kernel import (
    GridSpec,
    build_tables,
    full_kernel,
    outcomes,
    reduced_kernel,
    terminal_kernel,
)
from lobliq.model import Action, ModelParams, ReducedRaceKey, SystemState
from lobliq.presets import stylised_volume_dist
from lobliq.simulator import simulate_races

YHOO_KEY = ReducedRaceKey(1, 2, 1, 0, 1)


def within_3se(freq, prob, n, slack=0.0):
    return abs(freq - prob) <= 3 * math.sqrt(max(prob * (1 - prob), 1 / n) / n) + slack


@pytest.fixture(scope="module")
def yhoo_key_kernel(yhoo):
    return reduced_kernel(YHOO_KEY, yhoo, GridSpec())


def test_starts_at_zero(yhoo_key_kernel):
    _, cdfs = yhoo_key_kernel
    assert all(c[0] == 0.0 for c in cdfs.values())


def test_outcome_support():
    assert outcomes(0) == [(1, 0), (-1, 0)]
    assert outcomes(2) == [(1, 2), (-1, 0), (-1, 1), (-1, 2)]


def test_symmetric_race():
    up, down = stylised_volume_dist(5)
    p = ModelParams(mu=np.full((2, 2), 0.3), kappa=np.full((2, 2), 1.0), theta=np.full((2, 2), 0.4),
                    vol_dist_up=up, vol_dist_down=down)
    _, cdfs = reduced_kernel(ReducedRaceKey(1, 4, 3, 1, 0), p, GridSpec())
    assert abs(cdfs[(1, 0)][-1] - 0.5) < 1e-3
    assert abs(cdfs[(-1, 0)][-1] - 0.5) < 1e-3


def test_kernel_against_simulation(yhoo, yhoo_key_kernel):
    t, cdfs = yhoo_key_kernel
    n = 100_000
    s = simulate_races(YHOO_KEY, yhoo, n, seed=2024, t_limit=20.0)
    for (jt, zt), cdf in cdfs.items():
        for x in (1.0, 5.0, 20.0):
            q = float(np.interp(x, t, cdf))
            freq = np.mean((s.direction == jt) & (s.executed == zt) & (s.duration <= x))
            assert within_3se(freq, q, n), (jt, zt, x, freq, q)


def test_terminal_kernel_degenerate_cases(yhoo):
    assert terminal_kernel(YHOO_KEY, -1.0, 0, yhoo) == 1.0
    assert terminal_kernel(YHOO_KEY, -1.0, 1, yhoo) == 0.0
    assert terminal_kernel(YHOO_KEY, 2.0, 2, yhoo) == 0.0


def test_terminal_kernel_against_simulation(yhoo):
    n = 100_000
    s = simulate_races(YHOO_KEY, yhoo, n, seed=77, t_limit=2.0)
    alive = s.direction == 0
    for z in (0, 1):
        freq = np.mean(alive & (s.partial_at(2.0) == z))
        assert within_3se(freq, terminal_kernel(YHOO_KEY, 2.0, z, yhoo), n)


def test_terminal_kernel_matches_table(toy3_tables, toy3):
    tb = toy3_tables
    key = ReducedRaceKey(-1, 3, 2, 1, 2)
    for k in (1, 7, 20):
        lam = float(tb.lambda_grid[k])
        for z in range(3):
            assert abs(tb.p_at(key, z)[k] - terminal_kernel(key, lam, z, toy3)) < 1e-6


class TestTables:
    def test_key_count(self, toy3_tables):
        keys = list(toy3_tables.keys(1))
        # v_b = 1 admits m = 0 only
        assert len(keys) == 2 * 3 * 3 * 2 * 3 - 2 * 3 * 3

    def test_normalisation(self, toy3_tables):
        tb = toy3_tables
        for key in tb.keys(2):
            total = sum(tb.q_at(key, jt, zt)[-1] for jt, zt in outcomes(key.l))
            assert abs(total - 1) < 1e-3

    def test_monotone_columns(self, toy3_tables):
        q = toy3_tables.q
        assert np.all(np.diff(q, axis=-1) >= -1e-12)

    def test_q_p_consistency(self, toy3_tables):
        tb = toy3_tables
        K = tb.grid.n_lambda
        for key in tb.keys(2):
            Q = sum(tb.q_at(key, jt, zt)[:K] for jt, zt in outcomes(key.l))
            P = sum(tb.p_at(key, z) for z in range(key.l + 1))
            assert np.max(np.abs(P + Q - 1)) < 2e-3

    def test_up_moves_fill_everything(self, toy3_tables):
        tb = toy3_tables
        for key in tb.keys(2):
            for zt in range(key.l):
                assert not np.any(tb.q_at(key, 1, zt))
            assert not np.any(tb.q_at(key, -1, key.l + 1))

    def test_depletion_bound(self, toy3_tables, toy3):
        tb = toy3_tables
        grid = np.concatenate(([0.0], tb.t_tab))
        for zeta in (0.1, 1.0, 5.0):
            bound = 1 - math.exp(-2 * toy3.iota * zeta) + 5e-3
            for key in tb.keys(2):
                mass = sum(np.interp(zeta, grid, np.concatenate(([0.0], tb.q_at(key, jt, zt))))
                           for jt, zt in outcomes(key.l))
                assert mass <= bound

    def test_rebuild_is_identical(self, toy3, toy3_tables):
        again = build_tables(toy3, 2, 2, toy3_tables.grid)
        assert np.array_equal(again.q, toy3_tables.q)
        assert np.array_equal(again.p, toy3_tables.p)

    def test_save_load(self, toy3, toy3_tables, tmp_path):
        from lobliq.kernel import KernelTables
        toy3_tables.save(tmp_path / "t.npz")
        back = KernelTables.load(tmp_path / "t.npz", toy3)
        assert np.array_equal(back.q, toy3_tables.q)
        assert np.array_equal(back.lambda_grid, toy3_tables.lambda_grid)

    def test_grid_too_short(self, toy3):
        with pytest.raises(GridTooShort):
            build_tables(toy3, 1, 1, GridSpec(horizon=2.0, n_lambda=21, t_max=30.0))


class TestFullKernel:
    def test_indicators(self, toy3, toy3_tables):
        e = SystemState(1, 2, 2, 50, 0, 2)
        a = Action(1, 1)
        good = SystemState(-1, 1, 1, 49, 1, 0)
        assert full_kernel(e, a, 5.0, good, toy3, toy3_tables) > 0
        assert full_kernel(e, a, 5.0, SystemState(-1, 1, 1, 50, 1, 0), toy3, toy3_tables) == 0
        assert full_kernel(e, a, 5.0, SystemState(-1, 1, 1, 49, 1, 1), toy3, toy3_tables) == 0
        assert full_kernel(e, a, 0.0, good, toy3, toy3_tables) == 0

    def test_marginalises_to_one(self, toy3, toy3_tables):
        e = SystemState(-1, 3, 2, 50, 0, 2)
        for a in (Action(0, 2), Action(1, 1), Action(2, 0)):
            total = 0.0
            for jt in (1, -1):
                for zt in range(a.l + 1):
                    for vb in range(1, 4):
                        for va in range(1, 4):
                            nxt = SystemState(jt, vb, va, e.p + jt, zt, e.y - a.m - zt)
                            total += full_kernel(e, a, toy3_tables.t_max, nxt, toy3, toy3_tables)
            assert abs(total - 1) < 1e-3
