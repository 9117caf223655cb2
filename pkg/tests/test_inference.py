"""Sandwich and jackknife estimators against hand calculations."""

import math

import numpy as np
import pytest

from pairlmm.design import Stage, SurveyDesign
from pairlmm.fitting import fit_model
from pairlmm.inference import (
    assemble_weight_entries,
    jackknife_combine,
    jackknife_se,
    sandwich_beta,
)
from pairlmm.pairs import PairContext, enumerate_pairs
from pairlmm.structure import RandomStructure, grouping_term


def context_for(y, X, structure, design=None, mode="correlated"):
    ps = enumerate_pairs(structure, design=design, mode=mode)
    return PairContext(np.asarray(y, float), np.asarray(X, float), structure, ps)


class TestWeightEntries:
    def test_identity_single_pair(self):
        s = RandomStructure([grouping_term([0, 0])])
        ctx = context_for([0.0, 0.0], np.ones((2, 1)), s)
        W_diag, W_off = assemble_weight_entries(ctx, np.zeros(1))
        np.testing.assert_allclose(W_diag, [1.0, 1.0])
        np.testing.assert_allclose(W_off, [0.0])

    def test_offdiagonal_scaled_by_pair_probability(self):
        # Block [[2, 1], [1, 2]] has inverse corner -1/3; weight 1/0.5.
        s = RandomStructure([grouping_term([0, 0])])
        d = SurveyDesign.from_pair_table([1.0, 1.0], {(0, 1): 0.5}, ids=[0, 1])
        ctx = context_for([0.0, 0.0], np.ones((2, 1)), s, design=d)
        W_diag, W_off = assemble_weight_entries(ctx, np.array([1.0]))
        assert W_off[0] == pytest.approx((-1 / 3) / 0.5)

    def test_diagonal_accumulates_over_pairs(self):
        # One unit in 3 identity pairs with unit weights: W_ii = 3.
        s = RandomStructure([grouping_term([0, 0, 0, 0])])
        ctx = context_for(np.zeros(4), np.ones((4, 1)), s)
        W_diag, _ = assemble_weight_entries(ctx, np.zeros(1))
        np.testing.assert_allclose(W_diag, 3.0)

    def test_all_mode_adds_marginal_mass(self):
        # Singleton in all-pairs mode: W_ii = (Nhat - 1) / pi_i at theta 0.
        s = RandomStructure([grouping_term([0, 1, 2])])
        pi = np.array([0.5, 0.5, 0.25])
        d = SurveyDesign.from_probs(pi)
        ctx = context_for(np.zeros(3), np.ones((3, 1)), s, design=d, mode="all")
        W_diag, _ = assemble_weight_entries(ctx, np.zeros(1))
        nhat = ctx.nhat_units
        np.testing.assert_allclose(W_diag, (nhat - 1) / pi)


class TestSandwich:
    def test_census_zero_variance(self):
        rng = np.random.default_rng(0)
        groups = np.repeat(np.arange(5), 2)
        y = rng.normal(size=10)
        X = np.ones((10, 1))
        s = RandomStructure([grouping_term(groups)])
        d = SurveyDesign.census(10)
        ctx = context_for(y, X, s, design=d)
        beta = ctx.beta_hat(np.array([0.3]))
        vcov = sandwich_beta(ctx, np.array([0.3]), beta)
        np.testing.assert_allclose(vcov, 0.0, atol=1e-20)

    def test_matches_hand_horvitz_thompson(self):
        # Independent Bernoulli sampling, intercept-only, identity
        # covariance, all-pairs mode with singletons:
        # var = sum (1 - pi) e_i^2 / pi^2 / Nhat^2.
        y = np.array([1.0, 2.0, 3.0, 4.0])
        pi = np.array([0.5, 0.5, 0.25, 1.0])
        s = RandomStructure([grouping_term([0, 1, 2, 3])])
        d = SurveyDesign.from_probs(pi, strata=["a", "b", "c", "d"])
        ctx = context_for(y, np.ones((4, 1)), s, design=d, mode="all")
        theta = np.zeros(1)
        beta = ctx.beta_hat(theta)
        w = 1 / pi
        assert beta[0] == pytest.approx(np.sum(w * y) / np.sum(w))
        vcov = sandwich_beta(ctx, theta, beta)
        e = y - beta[0]
        nhat = np.sum(w)
        want = np.sum((1 - pi) * e**2 / pi**2) / nhat**2
        assert vcov[0, 0] == pytest.approx(want, rel=1e-12)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(4)
        n_groups, size = 12, 3
        groups = np.repeat(np.arange(n_groups), size)
        n = n_groups * size
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ np.array([1.0, 2.0]) + rng.normal(size=n)
        paths = [[Stage("srs", f"p{g}", n=n_groups, N=30),
                  Stage("srs", f"e{k}", n=size, N=8)]
                 for k, g in enumerate(groups)]
        d = SurveyDesign.from_paths(["s"] * n, paths)
        s = RandomStructure([grouping_term(groups)])
        ctx = context_for(y, X, s, design=d)
        beta = ctx.beta_hat(np.array([0.5]))
        vcov = sandwich_beta(ctx, np.array([0.5]), beta)
        np.testing.assert_allclose(vcov, vcov.T)
        assert np.all(np.linalg.eigvalsh(vcov) >= -1e-15)

    def test_invariant_under_pair_reordering(self):
        rng = np.random.default_rng(5)
        groups = np.repeat(np.arange(6), 2)
        n = 12
        y = rng.normal(size=n)
        X = np.ones((n, 1))
        s = RandomStructure([grouping_term(groups)])
        d = SurveyDesign.from_probs(rng.uniform(0.3, 0.9, n), strata=groups % 2)
        ps = enumerate_pairs(s, design=d)
        perm = np.random.default_rng(9).permutation(ps.n_pairs)
        from dataclasses import replace
        shuffled = replace(ps, ii=ps.ii[perm], jj=ps.jj[perm],
                           pi_pairs=ps.pi_pairs[perm])
        theta = np.array([0.4])
        ctx1 = PairContext(y, X, s, ps)
        ctx2 = PairContext(y, X, s, shuffled)
        b1 = ctx1.beta_hat(theta)
        v1 = sandwich_beta(ctx1, theta, b1)
        v2 = sandwich_beta(ctx2, theta, ctx2.beta_hat(theta))
        np.testing.assert_allclose(v1, v2, rtol=1e-12)

    def test_zero_delta_stratum_leaves_meat_unchanged(self):
        # A stratum whose pairs all have delta = 0 contributes nothing
        # beyond its diagonal terms: compare against a design where those
        # pairs are simply absent.
        rng = np.random.default_rng(6)
        n = 8
        y = rng.normal(size=n)
        X = np.ones((n, 1))
        groups = np.repeat(np.arange(4), 2)
        s = RandomStructure([grouping_term(groups)])
        pi = np.full(n, 0.5)
        table = {(0, 1): 0.4}  # only one correlated-design pair
        d1 = SurveyDesign.from_pair_table(pi, table, ids=list(range(n)))
        d2 = SurveyDesign.from_pair_table(
            pi, {**table, (4, 5): 0.25}, ids=list(range(n)))  # delta exactly 0
        theta = np.array([0.2])
        c1 = context_for(y, X, s, design=d1)
        c2 = context_for(y, X, s, design=d2)
        v1 = sandwich_beta(c1, theta, c1.beta_hat(theta))
        v2 = sandwich_beta(c2, theta, c2.beta_hat(theta))
        np.testing.assert_allclose(v1, v2, rtol=1e-14)


class TestJackknifeCombine:
    def test_identical_replicates_zero(self):
        full = np.array([1.0, 2.0])
        reps = [("s", full.copy()), ("s", full.copy())]
        se = jackknife_combine(full, reps, {"s": 0.5})
        np.testing.assert_allclose(se, 0.0)

    def test_symmetric_pair_gives_d(self):
        # Two replicates at full +/- d with stratum factor 1/2: SE = d.
        full = np.array([3.0])
        d = 0.7
        reps = [("s", np.array([3.0 + d])), ("s", np.array([3.0 - d]))]
        se = jackknife_combine(full, reps, {"s": 0.5})
        assert se[0] == pytest.approx(d, rel=1e-14)

    def test_failed_replicate_dropped_with_warning(self):
        paths = [
            [Stage("srs", "p0", n=2, N=4)],
            [Stage("srs", "p1", n=2, N=4)],
        ]
        design = SurveyDesign.from_paths(["s", "s"], paths)
        calls = {"k": 0}

        def refit(mult):
            calls["k"] += 1
            if calls["k"] == 1:
                raise RuntimeError("did not converge")
            return np.array([1.0])

        with pytest.warns(UserWarning, match="dropped"):
            se, dropped, total = jackknife_se(design, refit, np.array([1.0]))
        assert dropped == 1 and total == 2
        np.testing.assert_allclose(se, 0.0)


class TestFitLevelJackknife:
    def make_survey(self, seed=0, n_groups=24, size=2):
        rng = np.random.default_rng(seed)
        groups = np.repeat(np.arange(n_groups), size)
        n = n_groups * size
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        u = rng.normal(scale=0.8, size=n_groups)
        y = X @ np.array([1.0, 0.5]) + u[groups] + rng.normal(size=n)
        # PSU = model cluster here; 2 strata.
        strata = np.where(groups < n_groups // 2, "s1", "s2")
        paths = [[Stage("srs", f"p{g}", n=n_groups // 2, N=40),
                  Stage("srs", f"e{k}", n=size, N=size)]
                 for k, g in enumerate(groups)]
        d = SurveyDesign.from_paths(strata, paths)
        s = RandomStructure([grouping_term(groups)])
        return y, X, s, d

    def test_exchangeable_data_small_se(self):
        # Identical PSU payloads: every replicate reproduces the full fit.
        n_groups, size = 6, 2
        groups = np.repeat(np.arange(n_groups), size)
        y = np.tile([1.0, 2.0], n_groups)
        X = np.ones((len(y), 1))
        paths = [[Stage("srs", f"p{g}", n=n_groups, N=12),
                  Stage("srs", f"e{k}", n=size, N=size)]
                 for k, g in enumerate(groups)]
        d = SurveyDesign.from_paths(["s"] * len(y), paths)
        s = RandomStructure([grouping_term(groups)])
        fit = fit_model(y, X, s, design=d, se="jackknife")
        np.testing.assert_allclose(fit.jackknife["se"], 0.0, atol=1e-7)

    def test_jackknife_close_to_sandwich_for_beta(self):
        y, X, s, d = self.make_survey()
        fit = fit_model(y, X, s, design=d, se="both")
        assert fit.jackknife["n_dropped"] == 0
        ratio = fit.jackknife["se_beta"] / fit.se_beta
        assert np.all(ratio > 0.5) and np.all(ratio < 2.5)

    def test_jackknife_needs_design(self):
        y, X, s, _ = self.make_survey()
        with pytest.raises(ValueError, match="survey design"):
            fit_model(y, X, s, se="jackknife")
