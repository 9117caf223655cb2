"""Covariance-structure construction, 2x2 block algebra, and presets."""

import numpy as np
import pytest

from pairlmm.structure import (
    RandomStructure,
    SingularBlockError,
    StructureError,
    det_inv_2x2,
    grouping_term,
    preset,
    relatedness_term,
)


def intercept_structure(groups):
    return RandomStructure([grouping_term(groups, name="g")])


class TestEntries:
    def test_zero_theta_gives_identity(self):
        s = intercept_structure([0, 0, 1, 1])
        theta = np.zeros(1)
        assert s.entry(theta, 0, 0) == 1.0
        assert s.entry(theta, 0, 1) == 0.0
        assert s.entry(theta, 0, 2) == 0.0

    def test_shared_intercept(self):
        # z = 1, V = tau^2: off-diagonal tau^2, diagonal 1 + tau^2.
        s = intercept_structure([0, 0, 1])
        tau = 1.7
        assert s.entry([tau], 0, 1) == pytest.approx(tau**2, rel=1e-14)
        assert s.entry([tau], 0, 0) == pytest.approx(1 + tau**2, rel=1e-14)
        assert s.entry([tau], 0, 2) == 0.0

    def test_relatedness_half_weight(self):
        # Fraternal-pair additive weight 1/2: contribution 0.5 * tau_a^2.
        s = RandomStructure([relatedness_term({(0, 1): 0.5}, n=2, name="add")])
        tau_a = 1.3
        assert s.entry([tau_a], 0, 1) == pytest.approx(0.5 * tau_a**2, rel=1e-14)
        assert s.entry([tau_a], 0, 0) == pytest.approx(1 + tau_a**2, rel=1e-14)

    def test_entry_symmetric(self):
        rng = np.random.default_rng(7)
        s = RandomStructure([
            grouping_term(rng.integers(0, 3, 8), name="g"),
            relatedness_term({(0, 5): 0.5, (2, 7): 0.25}, n=8, name="k"),
        ])
        theta = rng.uniform(0.1, 2.0, s.n_theta)
        for i in range(8):
            for j in range(8):
                assert s.entry(theta, i, j) == s.entry(theta, j, i)

    def test_block_twin_environment(self):
        # One shared effect, tau = 2: block [[5, 4], [4, 5]].
        s = intercept_structure([0, 0])
        np.testing.assert_allclose(s.block([2.0], 0, 1), [[5, 4], [4, 5]])

    def test_block_unrelated_identity(self):
        s = intercept_structure([0, 1])
        np.testing.assert_allclose(s.block([3.0], 0, 1),
                                   [[10, 0], [0, 10]])  # diagonal only


class TestDetInv:
    def test_identity(self):
        det, inv = det_inv_2x2(np.eye(2))
        assert det == 1.0
        np.testing.assert_allclose(inv, np.eye(2))

    def test_textbook(self):
        det, inv = det_inv_2x2(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert det == pytest.approx(3.0)
        np.testing.assert_allclose(inv, [[2 / 3, -1 / 3], [-1 / 3, 2 / 3]])

    def test_twin_block(self):
        det, inv = det_inv_2x2(np.array([[5.0, 4.0], [4.0, 5.0]]))
        assert det == pytest.approx(9.0)
        np.testing.assert_allclose(inv, [[5 / 9, -4 / 9], [-4 / 9, 5 / 9]])

    def test_batch_no_dispatch(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(1, 3, 50)
        b = rng.uniform(-0.5, 0.5, 50)
        d = rng.uniform(1, 3, 50)
        blocks = np.stack([np.stack([a, b], axis=1), np.stack([b, d], axis=1)], axis=1)
        det, inv = det_inv_2x2(blocks)
        for k in range(50):
            np.testing.assert_allclose(inv[k] @ blocks[k], np.eye(2), atol=1e-12)
            assert det[k] == pytest.approx(a[k] * d[k] - b[k] ** 2)

    def test_singular_raises_with_location(self):
        blocks = np.array([[[2.0, 1.0], [1.0, 2.0]], [[1.0, 1.0], [1.0, 1.0]]])
        with pytest.raises(SingularBlockError, match="block 1"):
            det_inv_2x2(blocks)


class TestThetaLayout:
    def test_each_coordinate_feeds_one_entry(self):
        # Disjoint slices covering the whole vector: equality constraints
        # between parameters are not representable.
        s = RandomStructure([
            grouping_term([0, 0, 1, 1], z=np.c_[np.ones(4), [1., 2., 3., 4.]], name="a"),
            grouping_term([0, 1, 0, 1], name="b"),
        ])
        covered = []
        for sl in s.theta_slices:
            covered.extend(range(sl.start, sl.stop))
        assert covered == list(range(s.n_theta))

    def test_psd_coefficient_blocks(self):
        rng = np.random.default_rng(11)
        z = np.c_[np.ones(6), rng.normal(size=6)]
        s = RandomStructure([grouping_term([0, 0, 0, 1, 1, 1], z=z, name="g")])
        assert s.n_theta == 3
        for _ in range(20):
            theta = rng.normal(size=3)
            theta[[0, 2]] = np.abs(theta[[0, 2]])
            V = s.coef_blocks(theta)[0]
            w = np.linalg.eigvalsh(V)
            assert np.all(w >= -1e-12)

    def test_implied_matrix_positive_definite(self):
        # Eigenvalues of any principal submatrix stay above the unit
        # residual floor.
        rng = np.random.default_rng(23)
        for _ in range(10):
            n = 9
            s = RandomStructure([
                grouping_term(rng.integers(0, 3, n), name="g"),
                relatedness_term({(0, 4): 0.5, (1, 7): 0.5, (2, 8): 0.25}, n=n, name="k"),
            ])
            theta = rng.uniform(0, 1.5, s.n_theta)
            full = np.array([[s.entry(theta, i, j) for j in range(n)] for i in range(n)])
            idx = rng.choice(n, size=5, replace=False)
            sub = full[np.ix_(idx, idx)]
            assert np.all(np.linalg.eigvalsh(sub) >= 1 - 1e-10)

    def test_theta_length_checked(self):
        s = intercept_structure([0, 1])
        with pytest.raises(StructureError):
            s.coef_blocks(np.zeros(3))


class TestPresets:
    def test_twin_e_single_term(self):
        s = preset("twin-E", pair_ids=[0, 0, 1, 1])
        assert len(s.terms) == 1
        assert s.terms[0].q == 1
        assert s.n_theta == 1

    def test_twin_ade_weights(self):
        pair_ids = [0, 0, 1, 1]
        is_mz = [True, True, False, False]
        s = preset("twin-ADE", pair_ids=pair_ids, is_mz=is_mz)
        assert len(s.terms) == 3
        add, dom = s.terms[1], s.terms[2]
        assert add.weight(0, 1) == 1.0 and add.weight(2, 3) == 0.5
        assert dom.weight(0, 1) == 1.0 and dom.weight(2, 3) == 0.25

    def test_intercept_slope_three_parameters(self):
        s = preset("intercept-slope-by-group", groups=[0, 0, 1, 1],
                   slope=[0.5, 1.0, -1.0, 2.0])
        assert len(s.terms) == 1
        assert s.terms[0].q == 2
        assert s.n_theta == 3

    def test_herd_kinship(self):
        s = preset("herd-kinship", herd_ids=[0, 0, 1, 1], n=4,
                   kinship={(0, 2): 0.25})
        assert len(s.terms) == 2
        assert s.terms[1].weight(0, 2) == 0.25
        assert s.terms[1].weight(0, 0) == 1.0

    def test_unknown_preset(self):
        with pytest.raises(StructureError, match="unknown preset"):
            preset("twin-XYZ")


class TestCorrelatedPairs:
    def test_group_sizes(self):
        # Groups of sizes 2, 3, 4 give 1 + 3 + 6 pairs.
        groups = [0, 0, 1, 1, 1, 2, 2, 2, 2]
        s = intercept_structure(groups)
        assert len(s.correlated_pairs()) == 10

    def test_union_deduplicates(self):
        s = RandomStructure([
            grouping_term([0, 0, 1], name="g"),
            relatedness_term({(0, 1): 0.5}, n=3, name="k"),
        ])
        assert s.correlated_pairs() == [(0, 1)]

    def test_relatedness_only(self):
        entries = {(0, 1): 0.5, (0, 2): 0.25, (1, 3): 0.5, (2, 4): 0.125, (3, 4): 0.5}
        s = RandomStructure([relatedness_term(entries, n=5, name="k")])
        assert len(s.correlated_pairs()) == 5
