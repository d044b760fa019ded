import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ebcobart.trees import (
    Forest,
    Hyperparams,
    Tree,
    log_prior_leaves,
    log_prior_tree,
    predict_forest,
    predict_tree,
    sample_prior_tree,
    tree_structure_logprior,
)


def stump_split(var=0, cut=0.5, a=1.0, b=2.0):
    return Tree.split(var, cut, Tree.leaf(a), Tree.leaf(b))


def random_tree(seed, p=3, alpha=0.95, beta=1.0):
    rng = np.random.default_rng(seed)
    cuts = [np.sort(rng.uniform(size=5)) for _ in range(p)]
    return sample_prior_tree(alpha, beta, np.ones(p), cuts, rng, sigma_mu=1.0)


class TestTree:
    def test_leaf_counts(self):
        t = Tree.split(0, 0.5, stump_split(1, 0.2), Tree.leaf(3.0))
        assert t.n_leaves == 3
        assert t.n_internal == 2
        np.testing.assert_array_equal(t.depth, [0, 1, 2, 2, 1])
        np.testing.assert_array_equal(t.leaf_values, [1.0, 2.0, 3.0])

    def test_rejects_improper_tree(self):
        with pytest.raises(ValueError):
            Tree([0, -1], [0.5, 1.0], [1, -1], [0, 1])

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_leaves_equal_internals_plus_one(self, seed):
        t = random_tree(seed)
        assert t.n_leaves == t.n_internal + 1
        internal = np.flatnonzero(t.var >= 0)
        assert np.all(t.depth[internal + 1] == t.depth[internal] + 1)
        assert np.all(t.depth[t.right[internal]] == t.depth[internal] + 1)

    def test_node_list_round_trip(self):
        t = random_tree(3)
        assert Tree.from_nodes(t.to_nodes()) == t


class TestPredict:
    def test_single_leaf(self):
        assert predict_tree(Tree.leaf(0.0), np.array([0.3, 9.0])) == 0.0

    def test_routing(self):
        t = stump_split()
        assert predict_tree(t, np.array([0.3])) == 1.0
        assert predict_tree(t, np.array([0.7])) == 2.0

    def test_boundary_goes_left(self):
        assert predict_tree(stump_split(), np.array([0.5])) == 1.0

    def test_forest_of_constants(self):
        f = Forest([Tree.leaf(0.25)] * 4, 1.0, 2)
        np.testing.assert_array_equal(predict_forest(f, np.zeros((3, 2))), np.full(3, 1.0))

    def test_forest_single_tree(self):
        t = random_tree(1)
        X = np.random.default_rng(0).uniform(size=(20, 3))
        f = Forest([t], 1.0, 3)
        np.testing.assert_array_equal(predict_forest(f, X), [predict_tree(t, x) for x in X])

    def test_forest_is_sum_of_trees(self):
        trees = [random_tree(s) for s in range(3)]
        X = np.random.default_rng(1).uniform(size=(5, 3))
        oracle = np.zeros(5)
        for t in trees:
            for i, x in enumerate(X):
                oracle[i] += predict_tree(t, x)
        np.testing.assert_allclose(predict_forest(Forest(trees, 1.0, 3), X), oracle, rtol=0, atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            predict_forest(Forest([Tree.leaf()], 1.0, 3), np.zeros((2, 2)))

    @given(st.integers(0, 1000), st.floats(-5, 5, allow_nan=False))
    @settings(max_examples=30, deadline=None)
    def test_linear_in_leaf_values(self, seed, c):
        trees = [random_tree(seed + s) for s in range(3)]
        X = np.random.default_rng(seed).uniform(size=(7, 3))
        base = predict_forest(Forest(trees, 1.0, 3), X)
        scaled = predict_forest(Forest([t.scaled(c) for t in trees], 1.0, 3), X)
        np.testing.assert_allclose(scaled, c * base, rtol=1e-12, atol=1e-12)


class TestPriors:
    def test_single_leaf_prior(self):
        h = Hyperparams.uniform(3, alpha=0.95, beta=2.0)
        assert log_prior_tree(Tree.leaf(), h) == pytest.approx(math.log(0.05), abs=1e-12)
        assert log_prior_tree(Tree.leaf(), h) == pytest.approx(-2.9957, abs=1e-4)

    def test_root_split_prior(self):
        h = Hyperparams.uniform(10, alpha=0.95, beta=2.0)
        expected = math.log(0.1) + math.log(0.95) + 2 * math.log(1 - 0.95 * 2.0**-2)
        got = log_prior_tree(stump_split(3), h)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(-2.8963, abs=2e-4)

    def test_zero_alpha_with_split(self):
        assert tree_structure_logprior(stump_split(), 0.0, 2.0, [1.0]) == -math.inf

    def test_split_probability_one_raises(self):
        with pytest.raises(FloatingPointError):
            tree_structure_logprior(Tree.leaf(), 1.0, 2.0, [1.0])

    def test_leaf_prior_values(self):
        assert log_prior_leaves(Tree.leaf(0.0), 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
        two = Tree.split(0, 0.0, Tree.leaf(0.0), Tree.leaf(0.0))
        assert log_prior_leaves(two, 1.0) == pytest.approx(-1.8379, abs=1e-4)
        # log N(1; 0, 0.25) from scipy as the independent oracle
        assert log_prior_leaves(Tree.leaf(1.0), 0.5) == pytest.approx(stats.norm.logpdf(1.0, 0.0, 0.5), abs=1e-12)
        assert log_prior_leaves(Tree.leaf(1.0), 0.5) == pytest.approx(-2.2258, abs=1e-4)

    @pytest.mark.parametrize("alpha,beta", [(0.95, 2.0), (0.5, 0.5), (0.1, 4.0)])
    def test_depth_two_enumeration_matches_generative_mass(self, alpha, beta):
        s = np.array([0.3, 0.7])

        def shapes(d):
            # all subtrees rooted at depth d with every node at depth <= 2
            yield Tree.leaf()
            if d < 2:
                for j in range(len(s)):
                    for left, right in itertools.product(list(shapes(d + 1)), repeat=2):
                        yield Tree.split(j, 0.5, left, right)

        total = sum(math.exp(tree_structure_logprior(t, alpha, beta, s)) for t in shapes(0))

        def p_split(d):
            return alpha * (1 + d) ** -beta

        q2 = 1 - p_split(2)
        q1 = (1 - p_split(1)) + p_split(1) * q2**2
        q0 = (1 - p_split(0)) + p_split(0) * q1**2
        assert total == pytest.approx(q0, rel=1e-12)


class TestHyperparams:
    @given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=50))
    def test_weights_normalised(self, w):
        h = Hyperparams(0.5, 2.0, 2.0, 10.0, 1.0, w)
        assert abs(h.s.sum() - 1.0) < 1e-12

    @pytest.mark.parametrize("bad", [{"alpha": 0.0}, {"alpha": 1.0}, {"beta": -1.0}, {"s": [1.0, 0.0]}])
    def test_validation(self, bad):
        kw = dict(alpha=0.5, beta=2.0, k=2.0, nu=10.0, lam=1.0, s=[0.5, 0.5])
        kw.update(bad)
        with pytest.raises(ValueError):
            Hyperparams(**kw)

    def test_sigma_mu(self):
        h = Hyperparams.uniform(2, k=2.0)
        assert h.sigma_mu(50) == pytest.approx(0.5 / (2 * math.sqrt(50)))
        assert h.sigma_mu(50, "binary") == pytest.approx(3.0 / (2 * math.sqrt(50)))


class TestForestJson:
    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_bit_exact_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        trees = [random_tree(seed + i) for i in range(3)]
        f = Forest(trees, float(rng.uniform(0.1, 3)), 3, (float(rng.normal()), float(rng.normal() + 5)))
        g = Forest.from_json(f.to_json())
        assert g.sigma2 == f.sigma2 and g.response_scaling == f.response_scaling
        assert all(a == b for a, b in zip(f.trees, g.trees))
        assert g.to_json() == f.to_json()

    def test_version_checked(self):
        doc = Forest([Tree.leaf()], 1.0, 1).to_json().replace('"version": 1', '"version": 99')
        with pytest.raises(ValueError):
            Forest.from_json(doc)
