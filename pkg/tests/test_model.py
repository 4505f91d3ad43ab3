import json

import numpy as np
import pytest

from lobliq.model import (
    Action,
    ModelParams,
    ReducedRaceKey,
    SystemState,
    admissible_actions,
    dir_index,
    impact,
    periodic_reward,
    terminal_reward,
)
from lobliq.presets import stylised_volume_dist, yhoo_params


def state(j=1, v_b=3, v_a=3, p=100, z=0, y=2):
    return SystemState(j, v_b, v_a, p, z, y)


def test_admissible_with_deep_bid():
    got = set(admissible_actions(state(v_b=3, y=2), 2, 2))
    assert got == {(2, 0), (1, 0), (1, 1), (0, 0), (0, 1), (0, 2)}


def test_admissible_with_single_bid_unit():
    assert set(admissible_actions(state(v_b=1, y=2), 2, 2)) == {(0, 0), (0, 1), (0, 2)}


@pytest.mark.parametrize("v_b", [1, 2, 7])
def test_admissible_without_inventory(v_b):
    assert admissible_actions(state(v_b=v_b, y=0), 2, 2) == [(0, 0)]


def test_admissible_matches_definition(rng):
    for _ in range(200):
        s = state(v_b=int(rng.integers(1, 6)), y=int(rng.integers(0, 5)))
        mm, lm = int(rng.integers(0, 4)), int(rng.integers(0, 4))
        want = {(m, l) for m in range(mm + 1) for l in range(lm + 1) if m < s.v_b and m + l <= s.y}
        got = admissible_actions(s, mm, lm)
        assert set(got) == want
        assert (0, 0) in got
        assert got == sorted(got)


def test_periodic_reward_examples():
    assert periodic_reward(state(p=77, z=0), Action(0, 1), 1.0) == 0.0
    assert periodic_reward(state(p=100, j=1, z=1), Action(1, 0), 1.0) == 198.0
    assert periodic_reward(state(p=50, j=-1, z=2), Action(0, 0), 2.0) == 204.0


def test_periodic_reward_is_linear(rng):
    for _ in range(100):
        p, j, rho = int(rng.integers(2, 200)), int(rng.choice([1, -1])), float(rng.uniform(0.1, 3))
        m1, m2, z1, z2 = (int(x) for x in rng.integers(0, 4, size=4))
        r = lambda m, z: periodic_reward(SystemState(j, 5, 5, p, z, 9), Action(m, 0), rho)
        assert r(m1 + m2, z1 + z2) == pytest.approx(r(m1, z1) + r(m2, z2), rel=1e-14)


def test_terminal_reward_examples():
    assert terminal_reward(state(y=2), Action(2, 0), 0, 1.0, 9) == 0.0
    assert terminal_reward(state(p=100, y=2), Action(0, 2), 2, 1.0, 9) == 200.0
    assert terminal_reward(state(p=100, y=2), Action(0, 2), 0, 1.0, 9) == pytest.approx(198 - 2 / 9, abs=1e-12)


def test_terminal_reward_rejects_overfill():
    with pytest.raises(ValueError):
        terminal_reward(state(y=2), Action(0, 1), 2, 1.0, 9)


def test_rewards_nonnegative_and_monotone_in_fill(rng):
    for _ in range(300):
        y = int(rng.integers(0, 5))
        s = SystemState(int(rng.choice([1, -1])), int(rng.integers(1, 6)), 3, int(rng.integers(2, 60)),
                        int(rng.integers(0, 3)), y)
        for a in admissible_actions(s, 4, 4):
            assert periodic_reward(s, a, 1.0) >= 0
            vals = [terminal_reward(s, a, z, 1.0, 9) for z in range(a.l + 1)]
            assert min(vals) >= 0
            assert all(b >= a_ for a_, b in zip(vals, vals[1:]))


def test_impact_is_linear():
    assert impact(9, 2.0, 9) == 2.0


def test_state_validation():
    with pytest.raises(ValueError):
        SystemState(0, 1, 1, 5, 0, 1)
    with pytest.raises(ValueError):
        SystemState(1, 0, 1, 5, 0, 1)


def test_race_key_bid_start():
    assert ReducedRaceKey(1, 5, 2, 2, 1).bid_start == 3


def test_dir_index():
    assert dir_index(1) == 0 and dir_index(-1) == 1
    with pytest.raises(ValueError):
        dir_index(0)


def test_params_validation():
    p = yhoo_params()
    with pytest.raises(ValueError):
        p.replace(mu=np.zeros((2, 2)))
    bad = p.vol_dist_up.copy()
    bad[0, 0] += 0.01
    with pytest.raises(ValueError):
        p.replace(vol_dist_up=bad)
    with pytest.raises(ValueError):
        p.replace(rho=0.0)
    with pytest.raises(ValueError):
        p.replace(v_bar=0)


def test_params_are_read_only():
    p = yhoo_params()
    with pytest.raises(ValueError):
        p.mu[0, 0] = 1.0


def test_params_json_round_trip(tmp_path):
    p = yhoo_params(1)
    p.to_json(tmp_path / "p.json")
    q = ModelParams.from_json(tmp_path / "p.json")
    for name in ("mu", "kappa", "theta", "vol_dist_up", "vol_dist_down"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    assert (q.rho, q.v_bar, q.N) == (p.rho, p.v_bar, p.N)
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["rates"]["ask"]["up"] == {"mu": 0.13, "kappa": 1.87, "theta": 0.23}


def test_params_reject_unknown_keys():
    doc = yhoo_params().to_dict()
    doc["spread"] = 1
    with pytest.raises(ValueError):
        ModelParams.from_dict(doc)


def test_yhoo_preset_rates():
    p = yhoo_params(0)
    assert p.side_rates(0, 1) == (1.97, 0.14, 0.26)
    assert p.side_rates(1, 1) == (3.54, 0.17, 0.32)
    assert p.iota == pytest.approx(0.49)


def test_stylised_volume_dist_shape():
    up, down = stylised_volume_dist(25)
    assert up.shape == (25, 25) and up.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(down, up.T)
    # thin queue on the new best bid after an up-move
    assert (up.sum(axis=1) * np.arange(1, 26)).sum() < (up.sum(axis=0) * np.arange(1, 26)).sum()
