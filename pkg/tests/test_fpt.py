import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from oracles import hypoexp_cdf, hypoexp_pdf
from lobliq.errors import AccuracyLoss, NonConvergence
from lobliq.fpt import (
    BirthDeathSpec,
    continued_fraction,
    density_fpt_A,
    euler_invert,
    fpt_family_A,
    fpt_family_B,
    fpt_grid,
    invert_to_grid,
    laplace_fpt_A,
    laplace_fpt_B,
    laplace_fpt_C,
    mean_fpt_B,
    occupancy_weights,
    uniform_grid,
)
from lobliq.simulator import simulate_races
from lobliq.model import ReducedRaceKey


def bd_laplace_mc(v, kappa, mu, theta, s, n, seed):
    """Monte Carlo of E[exp(-s tau)] for the birth-death chain started at v."""
    rng = np.random.default_rng(seed)
    acc = np.empty(n)
    for i in range(n):
        x, t = v, 0.0
        while x > 0:
            d = mu + x * theta
            tot = kappa + d
            t += rng.exponential(1.0 / tot)
            x += 1 if rng.random() * tot < kappa else -1
        acc[i] = math.exp(-s * t)
    return acc.mean(), acc.std(ddof=1) / math.sqrt(n)


class TestContinuedFraction:
    def test_golden_ratio(self):
        # oracle: backward recurrence with 2000 terms
        x = 0.0
        for _ in range(2000):
            x = 1.0 / (1.0 + x)
        got = continued_fraction(lambda k: 1.0, lambda k: 1.0)
        assert abs(got - x) < 1e-10
        assert abs(got - (math.sqrt(5) - 1) / 2) < 1e-10

    def test_single_term(self):
        assert continued_fraction([3.0, 0.0, 0.0], [4.0, 1.0, 1.0]) == 0.75

    def test_nonconvergence(self):
        # alternating fraction that keeps oscillating
        with pytest.raises(NonConvergence):
            continued_fraction(lambda k: 1.0 if k == 0 else -1.0, lambda k: 1.0, max_terms=50)

    def test_B_transform_at_zero(self):
        assert abs(laplace_fpt_B(1, 1.0, 1.0, 1.0, 1e-12) - 1.0) < 1e-8


class TestTransforms:
    def test_B_pure_death_limit(self):
        assert abs(laplace_fpt_B(1, 1e-9, 1.0, 0.5, 1.0) - 0.6) < 1e-6

    @pytest.mark.parametrize("v,kappa,mu,theta", [(1, 2.0, 0.1, 0.3), (5, 3.5, 0.17, 0.32), (12, 1.0, 1.0, 1.0)])
    def test_B_normalised(self, v, kappa, mu, theta):
        assert abs(laplace_fpt_B(v, kappa, mu, theta, 1e-10) - 1.0) < 1e-6

    def test_B_bounded(self, rng):
        s = rng.uniform(0, 5, 50) + 1j * rng.uniform(-20, 20, 50)
        assert np.all(np.abs(laplace_fpt_B(3, 2.0, 0.2, 0.3, s)) <= 1 + 1e-12)

    def test_B_against_chain_simulation(self):
        exact = laplace_fpt_B(2, 1.0, 1.0, 1.0, 1.0).real
        mc, se = bd_laplace_mc(2, 1.0, 1.0, 1.0, 1.0, 200_000, 3)
        assert abs(mc - exact) < 3 * se

    def test_C_examples(self):
        assert laplace_fpt_C(1, 0, 1.0, 0.5, 1.0) == pytest.approx(1.5 / 2.5, abs=1e-15)
        assert laplace_fpt_C(4, 2, 1.0, 0.5, 0.0) == 1.0
        assert laplace_fpt_C(1, 2, 1.0, 0.5, 2.0) == pytest.approx((1 / 3) ** 2 * 1.5 / 3.5, rel=1e-14)

    def test_A_reduces_to_C_without_arrivals(self):
        s = np.array([0.3, 1.0 + 2j, 4.0])
        a = laplace_fpt_A(2, 1, 1e-12, 1.0, 1.0, s)
        c = laplace_fpt_C(2, 1, 1.0, 1.0, s)
        assert np.max(np.abs(a - c)) < 1e-9

    def test_A_normalised(self):
        assert abs(laplace_fpt_A(3, 2, 1.97, 0.14, 0.26, 1e-10) - 1.0) < 1e-6


class TestEuler:
    def test_exponential(self):
        t = np.linspace(0.01, 10, 500)
        f, _ = euler_invert(lambda s: 1 / (s + 1), t)
        assert np.max(np.abs(f - np.exp(-t))) < 1e-8

    def test_erlang(self):
        f, _ = euler_invert(lambda s: 1 / (s + 1) ** 2, [2.0])
        assert abs(f[0] - 2 * math.exp(-2)) < 1e-8

    def test_hypoexponential_C(self):
        t = uniform_grid(20.0, 400)
        g = fpt_grid(BirthDeathSpec("C", 2, 1.0, 1.0, l=1), t)
        rates = [1.0, 2.0, 3.0]
        assert np.max(np.abs(g.pdf - hypoexp_pdf(rates, t))) < 1e-6
        assert np.max(np.abs(g.cdf - hypoexp_cdf(rates, t))) < 1e-6

    def test_accuracy_loss_on_discontinuity(self):
        # uniform density on [0, 1] has a jump the inversion cannot resolve
        tr = lambda s: (1 - np.exp(-s)) / s
        with pytest.raises(AccuracyLoss):
            invert_to_grid(tr, np.linspace(0, 2, 41))

    def test_retransform_round_trip(self):
        t = np.linspace(0, 60, 12001)
        g = invert_to_grid(lambda s: laplace_fpt_C(2, 1, 1.0, 1.0, s), t)
        for s in (1.0, 2.0, 5.0):
            back = trapezoid(np.exp(-s * t) * g.pdf, t)
            assert abs(back - laplace_fpt_C(2, 1, 1.0, 1.0, s)) < 1e-4


class TestFptGrid:
    @pytest.mark.parametrize("spec", [
        BirthDeathSpec("B", 1, 0.14, 0.26, kappa=1.97),
        BirthDeathSpec("B", 4, 0.17, 0.32, kappa=3.54),
        BirthDeathSpec("C", 3, 0.14, 0.26, l=2),
    ])
    def test_grid_invariants(self, spec):
        # step 0.01 keeps the trapezoid error of the density below 1e-5
        t = uniform_grid(400.0, 40000)
        g = fpt_grid(spec, t)
        assert g.cdf[0] == 0.0
        assert np.all(np.diff(g.cdf) >= 0)
        assert g.cdf[-1] <= 1 + 1e-6
        assert abs(trapezoid(g.pdf, t) - g.cdf[-1]) < 1e-4

    def test_pdf_at_zero(self):
        t = uniform_grid(10.0, 200)
        assert fpt_grid(BirthDeathSpec("B", 1, 0.5, 0.25, kappa=1.0), t).pdf[0] == 0.75
        assert fpt_grid(BirthDeathSpec("B", 2, 0.5, 0.25, kappa=1.0), t).pdf[0] == 0.0

    def test_stochastic_ordering_bound(self):
        t = uniform_grid(30.0, 600)
        for kappa, mu, theta in [(1.97, 0.14, 0.26), (3.54, 0.17, 0.32), (0.5, 1.0, 2.0)]:
            g = fpt_grid(BirthDeathSpec("B", 1, mu, theta, kappa=kappa), t)
            assert np.all(g.survival >= np.exp(-(mu + theta) * t) - 5e-4)

    def test_family_matches_single(self):
        t = uniform_grid(50.0, 500)
        fam = fpt_family_B(4, 1.97, 0.14, 0.26, t)
        single = fpt_grid(BirthDeathSpec("B", 4, 0.14, 0.26, kappa=1.97), t)
        assert np.max(np.abs(fam[3].cdf - single.cdf)) < 1e-9

    def test_mean_B(self):
        t = uniform_grid(3000.0, 60000)
        g = fpt_grid(BirthDeathSpec("B", 2, 0.3, 0.5, kappa=1.0), t)
        assert trapezoid(g.survival, t) == pytest.approx(mean_fpt_B(2, 1.0, 0.3, 0.5), rel=1e-4)


class TestOccupancy:
    def test_empty_at_zero(self):
        w, tail = occupancy_weights(0.0, 2.0, 0.5, 5)
        assert w[0] == 1.0 and np.all(w[1:] == 0) and tail == 0.0

    def test_stationary_limit(self):
        w, _ = occupancy_weights(200.0, 1.0, 1.0, 6)
        want = [math.exp(-1) / math.factorial(j) for j in range(7)]
        assert np.allclose(w, want, atol=1e-12)

    def test_normalised(self, rng):
        for _ in range(20):
            u, k, th = rng.uniform(0, 50), rng.uniform(0.1, 5), rng.uniform(0.1, 1)
            w, tail = occupancy_weights(u, k, th, 60)
            assert abs(w.sum() + tail - 1) < 1e-12


class TestTwoPhase:
    def test_no_arrivals_matches_C(self):
        t = uniform_grid(20.0, 400)
        a = density_fpt_A(2, 1, 1e-9, 1.0, 1.0, t)
        c = fpt_grid(BirthDeathSpec("C", 2, 1.0, 1.0, l=1), t)
        assert np.max(np.abs(a.pdf - c.pdf)) < 1e-4

    def test_convolution_total_mass(self):
        t = uniform_grid(60.0, 3000)
        a = density_fpt_A(2, 1, 1.0, 1.0, 1.0, t)
        assert abs(a.cdf[-1] - 1) < 1e-3

    def test_transform_route_matches_convolution(self):
        t = uniform_grid(30.0, 3000)
        conv = density_fpt_A(2, 1, 1.0, 1.0, 1.0, t)
        lap = fpt_family_A(2, 1, 1.0, 1.0, 1.0, t)[1]
        assert np.max(np.abs(conv.cdf - lap.cdf)) < 1e-4

    def test_dominated_by_C(self):
        t = uniform_grid(100.0, 2000)
        for v, l in [(1, 1), (3, 2)]:
            a = fpt_family_A(v, l, 1.97, 0.14, 0.26, t)[v - 1]
            c = fpt_grid(BirthDeathSpec("C", v, 0.14, 0.26, l=l), t)
            assert np.all(a.cdf <= c.cdf + 1e-7)

    def test_against_simulation(self, toy):
        # the race simulator's ask side with a bid queue that never empties
        from lobliq.model import ModelParams
        p = ModelParams(mu=[[1.0, 1.0], [1e-9, 1e-9]], kappa=[[1.0, 1.0], [1e-9, 1e-9]],
                        theta=[[1.0, 1.0], [1e-9, 1e-9]], vol_dist_up=toy.vol_dist_up,
                        vol_dist_down=toy.vol_dist_down)
        n = 400_000
        s = simulate_races(ReducedRaceKey(1, 1, 2, 0, 1), p, n, seed=11, t_limit=3.0)
        t = uniform_grid(30.0, 3000)
        a = fpt_family_A(2, 1, 1.0, 1.0, 1.0, t)[1]
        for x in (0.5, 1.0, 2.0):
            emp = np.mean((s.direction == 1) & (s.duration <= x))
            F = a.cdf_at(x)
            assert abs(emp - F) < 3 * math.sqrt(F * (1 - F) / n) + 1e-4
