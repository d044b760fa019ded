import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize, stats

from ebcobart import kernels
from ebcobart.sampler import (
    ChainConfig,
    Dataset,
    chain_rng,
    cutpoints,
    default_lambda,
    draw_latent_probit,
    draw_leaf_values,
    draw_sigma2,
    gelman_rubin,
    node_marginal_loglik,
    propose_and_accept_tree,
    residual,
    run_chains,
)
from ebcobart.trees import Forest, Hyperparams, Tree, predict_forest, predict_tree


def quad_marginal(r, sigma2, sigma_mu2):
    r = np.asarray(r, dtype=float)

    def log_integrand(mu):
        return np.sum(stats.norm.logpdf(r, mu, math.sqrt(sigma2))) + stats.norm.logpdf(mu, 0, math.sqrt(sigma_mu2))

    # rescale by the numerically located peak so the integral is O(1)
    peak = optimize.minimize_scalar(lambda m: -log_integrand(m), bounds=(-10, 10), method="bounded",
                                    options={"xatol": 1e-10}).x
    top = log_integrand(peak)
    val, _ = integrate.quad(lambda m: np.exp(log_integrand(m) - top), -np.inf, np.inf,
                            epsabs=1e-14, epsrel=1e-12)
    return top + math.log(val)


def friedman(N, p, seed):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(size=(N, max(p, 5)))
    f = 10 * np.sin(np.pi * Z[:, 0] * Z[:, 1]) + 20 * (Z[:, 2] - 0.5) ** 2 + 10 * Z[:, 3] + 5 * Z[:, 4]
    return Z[:, :p], f + rng.standard_normal(N)


class TestResidual:
    def test_single_tree(self):
        y = np.array([1.0, 2.0, 3.0])
        f = Forest([Tree.split(0, 0.5, Tree.leaf(1.0), Tree.leaf(2.0))], 1.0, 1)
        np.testing.assert_array_equal(residual(y, f, 0, np.array([[0.0], [1.0], [0.2]])), y)

    def test_constant_other_tree(self):
        y = np.array([1.0, 2.0])
        f = Forest([Tree.leaf(0.3), Tree.leaf(0.7)], 1.0, 1)
        np.testing.assert_allclose(residual(y, f, 0, np.zeros((2, 1))), y - 0.7)

    def test_matches_full_prediction(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(size=(10, 2))
        trees = [Tree.split(j % 2, 0.3 + 0.2 * j, Tree.leaf(rng.normal()), Tree.leaf(rng.normal())) for j in range(3)]
        f = Forest(trees, 1.0, 2)
        y = rng.normal(size=10)
        for t in range(3):
            oracle = y - predict_forest(f, X) + np.array([predict_tree(trees[t], x) for x in X])
            np.testing.assert_allclose(residual(y, f, t, X), oracle, atol=1e-14)


class TestNodeMarginal:
    def test_single_point(self):
        got = node_marginal_loglik([0.0], 1.0, 1.0)
        assert got == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-12)
        assert got == pytest.approx(-1.2655, abs=1e-4)

    def test_empty(self):
        assert node_marginal_loglik([], 1.0, 1.0) == 0.0

    def test_quadrature(self):
        assert node_marginal_loglik([1.0, -1.0], 1.0, 4.0) == pytest.approx(quad_marginal([1.0, -1.0], 1.0, 4.0), abs=1e-8)

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(0.1, 3), st.floats(0.05, 3))
    @settings(max_examples=30, deadline=None)
    def test_quadrature_random(self, r, s2, sm2):
        assert node_marginal_loglik(r, s2, sm2) == pytest.approx(quad_marginal(r, s2, sm2), abs=1e-8)

    def test_reduced_form_difference(self):
        # the kernel drops terms shared by all partitions of the same residuals
        r = np.array([0.3, -1.2, 0.8, 2.0])
        a, b = r[:1], r[1:]
        full = node_marginal_loglik(a, 0.7, 0.2) + node_marginal_loglik(b, 0.7, 0.2) - node_marginal_loglik(r, 0.7, 0.2)
        red = (kernels.node_loglik_reduced(1.0, a.sum(), 0.7, 0.2) + kernels.node_loglik_reduced(3.0, b.sum(), 0.7, 0.2)
               - kernels.node_loglik_reduced(4.0, r.sum(), 0.7, 0.2))
        assert red == pytest.approx(full, abs=1e-12)

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            node_marginal_loglik([1.0], -1.0, 1.0)


class TestProposals:
    def test_stump_only_grows(self):
        rng = chain_rng(0)
        X = np.random.default_rng(0).uniform(size=(30, 2))
        r = np.random.default_rng(1).normal(size=30)
        h = Hyperparams.uniform(2, alpha=0.95, beta=0.5)
        for _ in range(50):
            t = propose_and_accept_tree(Tree.leaf(), X, r, 1.0, h, 1.0, rng)
            assert t.n_internal <= 1

    def test_degenerate_split_weights(self):
        rng = chain_rng(1)
        X = np.random.default_rng(2).uniform(size=(40, 4))
        r = 3 * X[:, 0] + X[:, 2]
        h = Hyperparams(0.95, 0.5, 1.0, 10.0, 1.0, [1e-300, 1e-300, 1.0, 1e-300])
        t = Tree.leaf()
        for _ in range(300):
            t = propose_and_accept_tree(t, X, r, 0.1, h, 1.0, rng)
            t = draw_leaf_values(t, X, r, 0.1, 1.0, rng)
            assert set(t.var[t.var >= 0].tolist()) <= {2}
        assert t.n_internal > 0

    def test_no_empty_leaves_after_moves(self):
        rng = chain_rng(2)
        X = np.round(np.random.default_rng(3).uniform(size=(25, 3)), 1)
        r = np.random.default_rng(4).normal(size=25)
        h = Hyperparams.uniform(3, alpha=0.95, beta=0.2)
        cuts = cutpoints(X)
        t = Tree.leaf()
        for _ in range(300):
            t = propose_and_accept_tree(t, X, r, 0.5, h, 1.0, rng, cuts)
            leaves = set()
            for x in X:
                k = 0
                while t.var[k] >= 0:
                    k = k + 1 if x[t.var[k]] <= t.value[k] else t.right[k]
                leaves.add(k)
            assert leaves == set(np.flatnonzero(t.var < 0).tolist())
            assert t.n_leaves == t.n_internal + 1

    def test_two_point_stationary_distribution(self):
        # x in {0, 1}, one cut: only the stump and the single split are reachable
        X = np.array([[0.0], [1.0]])
        r = np.array([-0.4, 0.5])
        sigma2, sigma_mu = 0.1, 0.5
        alpha, beta = 0.6, 1.0
        h = Hyperparams(alpha, beta, 1.0, 10.0, 1.0, [1.0])
        log_post = np.array([
            math.log(1 - alpha) + node_marginal_loglik(r, sigma2, sigma_mu**2),
            math.log(alpha) + 2 * math.log(1 - alpha * 2**-beta)
            + node_marginal_loglik(r[:1], sigma2, sigma_mu**2) + node_marginal_loglik(r[1:], sigma2, sigma_mu**2),
        ])
        exact = np.exp(log_post - np.logaddexp(*log_post))
        rng = chain_rng(3)
        t = Tree.leaf()
        n_split = 0
        n = 40_000
        for _ in range(n):
            t = propose_and_accept_tree(t, X, r, sigma2, h, sigma_mu, rng)
            n_split += t.n_internal
        assert t.n_internal <= 1
        se = math.sqrt(exact[1] * exact[0] / n) * 4  # autocorrelation allowance
        assert abs(n_split / n - exact[1]) < max(5 * se, 0.01)


class TestConjugateDraws:
    def test_leaf_posterior_moments(self):
        X = np.zeros((4, 1))
        r = np.array([0.5, 0.5, 0.5, 0.5])
        rng = chain_rng(4)
        n = 20_000
        draws = np.array([draw_leaf_values(Tree.leaf(), X, r, 1.0, 1.0, rng).value[0] for _ in range(n)])
        assert abs(draws.mean() - 0.4) < 3 * math.sqrt(0.2 / n)
        assert abs(draws.var(ddof=1) - 0.2) < 3 * 0.2 * math.sqrt(2 / (n - 1))

    def test_empty_leaf_draws_from_prior(self):
        X = np.zeros((3, 1))
        tree = Tree.split(0, 5.0, Tree.leaf(), Tree.leaf())  # every row routes left
        rng = chain_rng(5)
        vals = np.array([draw_leaf_values(tree, X, np.ones(3), 1.0, 0.7, rng).value[2] for _ in range(5000)])
        assert stats.kstest(vals, stats.norm(0, 0.7).cdf).pvalue > 0.001

    def test_large_leaf_concentrates(self):
        n = 10_000
        t = draw_leaf_values(Tree.leaf(), np.zeros((n, 1)), np.full(n, 1.5), 1.0, 1.0, chain_rng(6))
        assert abs(t.value[0] - 1.5) < 1e-2

    def test_sigma2_median(self):
        # N=2, nu=2, lam=1, SSR=3: IG(2, 2.5), whose variance is infinite
        rng = chain_rng(7)
        y, yhat = np.array([0.0, 0.0]), np.array([1.0, math.sqrt(2.0)])
        d = np.array([draw_sigma2(y, yhat, 2.0, 1.0, rng) for _ in range(20_000)])
        assert np.median(d) == pytest.approx(stats.invgamma(2.0, scale=2.5).median(), rel=0.03)
        assert np.all(d > 0) and np.all(np.isfinite(d))

    def test_sigma2_ks(self):
        rng = chain_rng(8)
        y = np.zeros(2)
        d = np.array([draw_sigma2(y, y, 10.0, 0.5, rng) for _ in range(5000)])
        assert stats.kstest(d, stats.invgamma(6.0, scale=2.5).cdf).pvalue > 0.01

    def test_sigma2_prior_limit(self):
        rng = chain_rng(9)
        d = np.array([draw_sigma2(np.zeros(0), np.zeros(0), 10.0, 0.5, rng) for _ in range(5000)])
        assert stats.kstest(d, stats.invgamma(5.0, scale=2.5).cdf).pvalue > 0.01

    def test_sigma2_binary_rejected(self):
        with pytest.raises(TypeError):
            draw_sigma2(np.zeros(2), np.zeros(2), 10.0, 1.0, chain_rng(0), "binary")

    def test_latent_half_normal(self):
        n = 50_000
        z = draw_latent_probit(np.ones(n), np.zeros(n), chain_rng(10))
        assert np.all(z > 0)
        sd = math.sqrt(1 - 2 / math.pi)
        assert abs(z.mean() - math.sqrt(2 / math.pi)) < 3 * sd / math.sqrt(n)

    def test_latent_negative_side(self):
        z = draw_latent_probit(np.zeros(1000), np.linspace(-3, 9, 1000), chain_rng(11))
        assert np.all(z <= 0)

    def test_latent_far_tail(self):
        n = 20_000
        z = draw_latent_probit(np.ones(n), np.full(n, 8.0), chain_rng(12))
        assert abs(z.mean() - 8.0) < 3 / math.sqrt(n)
        z = draw_latent_probit(np.ones(n), np.full(n, -6.0), chain_rng(13))
        assert np.all(z > 0)

    @given(st.lists(st.tuples(st.integers(0, 1), st.floats(-20, 20)), min_size=1, max_size=50), st.integers(0, 2**32))
    @settings(max_examples=50, deadline=None)
    def test_latent_sign_matches_label(self, pairs, seed):
        y = np.array([p[0] for p in pairs], dtype=float)
        g = np.array([p[1] for p in pairs])
        z = draw_latent_probit(y, g, chain_rng(seed))
        assert np.all((z > 0) == (y == 1))


class TestRunChains:
    def test_deterministic_replay(self):
        X, y = friedman(40, 5, 0)
        d = Dataset(X, y)
        h = Hyperparams.uniform(5, lam=0.05)
        cfg = ChainConfig(2, 60, 20, seed=11)
        assert run_chains(d, h, 10, cfg).digest() == run_chains(d, h, 10, cfg).digest()
        other = run_chains(d, h, 10, ChainConfig(2, 60, 20, seed=12))
        assert other.digest() != run_chains(d, h, 10, cfg).digest()

    def test_bookkeeping_checked_every_sweep(self):
        X, y = friedman(30, 4, 1)
        h = Hyperparams.uniform(4, lam=0.05)
        draws = run_chains(Dataset(X, y), h, 8, ChainConfig(2, 80, 10), check=True)
        assert draws.n_draws == 2 * 70
        run_chains(Dataset(X, (y > y.mean()).astype(float), "binary"), h, 8, ChainConfig(1, 50, 10), check=True)

    def test_split_counts_sum_to_internal_nodes(self):
        X, y = friedman(30, 4, 2)
        draws = run_chains(Dataset(X, y), Hyperparams.uniform(4, lam=0.05), 6, ChainConfig(2, 40, 10))
        counts = draws.split_counts()
        for d in range(draws.n_draws):
            internal = sum(draws.tree(d, t).n_internal for t in range(draws.K))
            assert counts[d].sum() == internal
        assert draws.loglik.shape == (draws.n_draws, 30)
        assert np.all(draws.sigma2 > 0) and np.all(np.isfinite(draws.sigma2))

    def test_retained_draws_rebuild_fit(self):
        X, y = friedman(25, 3, 3)
        draws = run_chains(Dataset(X, y), Hyperparams.uniform(3, lam=0.05), 5, ChainConfig(1, 30, 5))
        g = draws.predict_latent(X)
        np.testing.assert_allclose(g.mean(axis=1), draws.fit_mean, atol=1e-12)

    def test_thinning(self):
        X, y = friedman(20, 2, 4)
        draws = run_chains(Dataset(X, y), Hyperparams.uniform(2, lam=0.05), 3, ChainConfig(2, 25, 5, thin=3))
        assert draws.n_draws == 2 * 7
        np.testing.assert_array_equal(draws.sweep[:7], [5, 8, 11, 14, 17, 20, 23])

    def test_non_finite_response(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), np.array([1.0, np.nan]))

    def test_pure_noise_sigma2(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(size=(200, 1))
        y = rng.standard_normal(200)
        h = Hyperparams.uniform(1, alpha=0.95, beta=2.0, k=2.0)
        from ebcobart.sampler import response_scaling, scale_response

        h = h.replace(lam=default_lambda(scale_response(y, response_scaling(y))))
        draws = run_chains(Dataset(X, y), h, 50, ChainConfig(4, 1500, 300, seed=3))
        assert 0.8 <= draws.sigma2_original().mean() <= 1.25

    def test_beats_null_model(self):
        X, y = friedman(100, 10, 6)
        from ebcobart.sampler import response_scaling, scale_response

        h = Hyperparams.uniform(10, lam=default_lambda(scale_response(y, response_scaling(y))))
        draws = run_chains(Dataset(X, y), h, 50, ChainConfig(2, 600, 200, seed=1))
        pred = draws.predict_draws(X).mean(axis=0)
        assert np.mean((y - pred) ** 2) < np.mean((y - y.mean()) ** 2)

    def test_default_lambda_quantile(self):
        y = np.random.default_rng(0).uniform(-0.5, 0.5, size=50)
        lam = default_lambda(y, 10.0)
        prior = stats.invgamma(5.0, scale=5.0 * lam)
        assert prior.cdf(2.0 / 3.0 * np.var(y, ddof=1)) == pytest.approx(0.75, abs=1e-10)


class TestGelmanRubin:
    def test_identical_chains(self):
        t = np.random.default_rng(0).normal(size=50)
        assert gelman_rubin([t, t]) == pytest.approx(math.sqrt(49 / 50), abs=1e-12)

    def test_same_distribution(self):
        rng = np.random.default_rng(1)
        assert gelman_rubin([rng.normal(size=10_000) for _ in range(4)]) < 1.01

    def test_constant_chains(self):
        with pytest.raises(ValueError):
            gelman_rubin([np.ones(10), np.ones(10)])

    def test_unequal_lengths(self):
        with pytest.raises(ValueError):
            gelman_rubin([np.arange(3.0), np.arange(4.0)])


PY_DIGEST = """
import json, numpy as np
from ebcobart.sampler import Dataset, ChainConfig, run_chains
from ebcobart.trees import Hyperparams
from ebcobart import kernels, backend
rng = np.random.default_rng(0)
X = rng.uniform(size=(15, 3)); y = X[:, 0] + 0.1 * rng.normal(size=15)
d = run_chains(Dataset(X, y), Hyperparams.uniform(3, lam=0.05), 4, ChainConfig(1, 12, 4, seed=5))
p = kernels.predict_draws_numpy(d.tree_ptr, d.node_var, d.node_value, d.node_right, d.K, X)
print(json.dumps({"backend": backend(), "digest": d.digest(), "pred": p.tolist()}))
"""


def run_backend(disable_jit):
    env = dict(os.environ, EBCOBART_DISABLE_JIT="1" if disable_jit else "0")
    out = subprocess.run([sys.executable, "-c", PY_DIGEST], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


class TestBackends:
    def test_interpreted_fallback_is_bit_identical(self):
        jit, py = run_backend(False), run_backend(True)
        assert jit["backend"] == "numba" and py["backend"] == "python"
        assert jit["digest"] == py["digest"]
        assert jit["pred"] == py["pred"]

    def test_numpy_prediction_matches_kernel(self):
        X, y = friedman(30, 4, 7)
        d = run_chains(Dataset(X, y), Hyperparams.uniform(4, lam=0.05), 5, ChainConfig(1, 20, 5))
        a = kernels.predict_draws(d.tree_ptr, d.node_var, d.node_value, d.node_right, d.K, X)
        b = kernels.predict_draws_numpy(d.tree_ptr, d.node_var, d.node_value, d.node_right, d.K, X)
        np.testing.assert_array_equal(a, b)
