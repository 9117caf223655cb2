"""Projected Nelder-Mead contract and moment starting values."""

import numpy as np
import pytest

from pairlmm.optim import Bounds, OptimizerError, minimize_bounded, starting_values
from pairlmm.structure import RandomStructure, grouping_term, relatedness_term


def box(lower, upper):
    return Bounds(lower=np.asarray(lower, float), upper=np.asarray(upper, float))


class TestMinimize:
    def test_quadratic_bowl(self):
        res = minimize_bounded(lambda x: (x[0] - 0.7) ** 2, np.array([2.0]),
                               box([0.0], [np.inf]))
        assert res.converged
        assert res.x[0] == pytest.approx(0.7, abs=1e-6)

    def test_active_constraint(self):
        res = minimize_bounded(lambda x: (x[0] + 0.5) ** 2, np.array([1.0]),
                               box([0.0], [np.inf]))
        assert res.x[0] == pytest.approx(0.0, abs=1e-8)

    def test_rosenbrock_in_box(self):
        def rosen(x):
            return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2

        res = minimize_bounded(rosen, np.array([0.2, 1.8]), box([0, 0], [2, 2]),
                               max_evals=20000)
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-4)

    def test_monotone_and_feasible(self):
        lower, upper = np.array([0.0, -1.0]), np.array([2.0, 1.0])
        seen = []

        def f(x):
            seen.append(x.copy())
            return float(np.sum((x - 0.3) ** 2))

        start = np.array([1.9, 0.9])
        res = minimize_bounded(f, start, box(lower, upper))
        assert res.fun <= f(start)
        for x in seen:
            assert np.all(x >= lower - 1e-15) and np.all(x <= upper + 1e-15)

    def test_deterministic_iterates(self):
        def run():
            log = []

            def f(x):
                log.append(tuple(x))
                return float((x[0] - 1.3) ** 2 + abs(x[1]))

            minimize_bounded(f, np.array([0.0, 0.5]), box([0, 0], [np.inf, np.inf]))
            return log

        assert run() == run()

    def test_nonfinite_region_recovers(self):
        def f(x):
            if x[0] > 1.0:
                return np.inf
            return (x[0] - 0.9) ** 2

        res = minimize_bounded(f, np.array([0.5]), box([0.0], [np.inf]))
        assert res.x[0] == pytest.approx(0.9, abs=1e-6)
        assert res.n_nonfinite >= 0

    def test_nonfinite_start_aborts(self):
        with pytest.raises(OptimizerError, match="starting point"):
            minimize_bounded(lambda x: np.nan, np.array([0.5]), box([0.0], [np.inf]))

    def test_budget_reported(self):
        res = minimize_bounded(lambda x: (x[0] - 5) ** 2, np.array([0.0]),
                               box([0.0], [np.inf]), max_evals=10)
        assert not res.converged
        assert res.reason == "max_evals"
        assert res.n_evals <= 12  # budget checked per iteration

    def test_empty_theta(self):
        res = minimize_bounded(lambda x: 3.5, np.zeros(0), box([], []))
        assert res.converged and res.fun == 3.5


class TestStartingValues:
    def test_pure_noise_floors(self):
        rng = np.random.default_rng(0)
        n = 200
        groups = np.repeat(np.arange(40), 5)
        X = np.ones((n, 1))
        y = rng.normal(size=n)
        s = RandomStructure([grouping_term(groups)])
        theta0 = starting_values(y, X, s)
        assert theta0[0] == pytest.approx(0.1, abs=0.25)
        assert theta0[0] >= 0.1

    def test_strong_signal_in_range(self):
        # Shared-effect SD equal to the residual SD: the moment start should
        # land within a factor of 3 of 1.
        rng = np.random.default_rng(1)
        n_groups, size = 60, 6
        groups = np.repeat(np.arange(n_groups), size)
        u = rng.normal(size=n_groups)
        y = u[groups] + rng.normal(size=n_groups * size)
        X = np.ones((len(y), 1))
        s = RandomStructure([grouping_term(groups)])
        theta0 = starting_values(y, X, s)
        assert 1 / 3 < theta0[0] < 3

    def test_no_random_terms(self):
        s = RandomStructure([], n=3)
        assert starting_values(np.zeros(3), np.ones((3, 1)), s).size == 0

    def test_offdiagonals_zero_and_kinship_floor(self):
        rng = np.random.default_rng(2)
        n = 30
        groups = np.repeat(np.arange(10), 3)
        z = np.column_stack([np.ones(n), rng.normal(size=n)])
        s = RandomStructure([
            grouping_term(groups, z=z),
            relatedness_term({(0, 15): 0.5}, n=n),
        ])
        theta0 = starting_values(rng.normal(size=n), np.ones((n, 1)), s)
        assert theta0.shape == (4,)
        assert theta0[1] == 0.0          # off-diagonal
        assert theta0[2] == 0.1          # second diagonal floored
        assert theta0[3] == 0.1          # relatedness coefficient
