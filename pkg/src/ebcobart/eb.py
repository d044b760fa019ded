"""Empirical-Bayes M-step updates computed from a set of posterior draws."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, special

from .sampler import DrawSet
from .trees import Tree

ALPHA_EPS = 1e-6
BETA_MAX = 10.0
ALPHA_BETA_STARTS = ((0.1, 4.0), (0.5, 2.0), (0.95, 2.0), (0.5, 0.5))

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 200
# log(mean(1/x)) + mean(log x) below this means the draws are numerically constant
DEGENERATE_GAP = 1e-13


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlphaBetaFit:
    alpha: float
    beta: float
    loglik: float
    at_boundary: bool


def count_splits(draws: DrawSet):
    """Split counts per covariate pooled over trees, draws and chains; returns (b, B)."""
    if draws.n_draws == 0:
        raise ValueError("empty DrawSet")
    b = draws.split_counts().sum(axis=0)
    return b, int(b.sum())


def s1_estimate(b, B) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if B <= 0:
        raise ValueError("no splitting rules observed (B = 0)")
    return b / B


def update_k(draws: DrawSet, K: int, c: float) -> float:
    """k implied by the ML leaf scale sqrt(sum mu^2 / n_leaves) under sigma_mu = c / (k sqrt K)."""
    return k_from_leaves(draws.leaf_values(), K, c)


def k_from_leaves(mu, K: int, c: float) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    if mu.size == 0:
        raise ValueError("no leaf values")
    ss = float(np.sum(mu * mu))
    if ss == 0.0:
        raise ValueError("all leaf values are zero; k is unbounded")
    return c * math.sqrt(mu.size / ss) / math.sqrt(K)


def inverse_gamma_loglik(x, nu: float, lam: float) -> float:
    """sum log IG(x; nu/2, nu*lam/2)."""
    x = np.asarray(x, dtype=np.float64)
    a = 0.5 * nu
    b = 0.5 * nu * lam
    return float(np.sum(a * math.log(b) - special.gammaln(a) - (a + 1.0) * np.log(x) - b / x))


def update_nu_lambda(sigma2_draws):
    """ML (nu, lambda) of IG(nu/2, nu*lambda/2), with the scale profiled out.

    Solves log a - digamma(a) = log(mean(1/x)) + mean(log x) for the shape
    ``a`` by Newton's method in log a.
    """
    x = np.asarray(sigma2_draws, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("need at least two draws")
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("draws must be positive and finite")
    inv_mean = float(np.mean(1.0 / x))
    gap = math.log(inv_mean) + float(np.mean(np.log(x)))
    if gap <= DEGENERATE_GAP:
        raise ValueError("draws are (numerically) constant; shape is unbounded")
    # Minka's starting point for the gamma shape
    a = (3.0 - gap + math.sqrt((gap - 3.0) ** 2 + 24.0 * gap)) / (12.0 * gap)
    for _ in range(NEWTON_MAX_ITER):
        f = math.log(a) - special.digamma(a) - gap
        if abs(f) < NEWTON_TOL:
            return 2.0 * a, 1.0 / inv_mean
        fprime = 1.0 - a * special.polygamma(1, a)  # d f / d log a
        a *= math.exp(-f / fprime)
    raise ConvergenceError(f"shape Newton iteration did not converge in {NEWTON_MAX_ITER} steps")


def depth_counts(trees: Sequence[Tree]):
    """(internal counts, leaf counts) by depth over a collection of trees."""
    depth = np.concatenate([t.depth for t in trees])
    internal = np.concatenate([t.var >= 0 for t in trees])
    size = int(depth.max()) + 1
    return np.bincount(depth[internal], minlength=size), np.bincount(depth[~internal], minlength=size)


def alpha_beta_loglik(alpha: float, beta: float, n_internal, n_leaf) -> float:
    """Tree-structure log likelihood from node counts by depth."""
    n_internal = np.asarray(n_internal, dtype=np.float64)
    n_leaf = np.asarray(n_leaf, dtype=np.float64)
    d = np.arange(max(len(n_internal), len(n_leaf)), dtype=np.float64)
    n_internal = np.pad(n_internal, (0, len(d) - len(n_internal)))
    n_leaf = np.pad(n_leaf, (0, len(d) - len(n_leaf)))
    log_split = math.log(alpha) - beta * np.log1p(d)
    log_stop = np.log1p(-np.exp(log_split))
    return float(np.sum(n_internal * log_split) + np.sum(n_leaf * log_stop))


def fit_alpha_beta(n_internal, n_leaf, eps: float = ALPHA_EPS, beta_max: float = BETA_MAX) -> AlphaBetaFit:
    n_internal = np.asarray(n_internal)
    if np.sum(n_internal) == 0:
        # likelihood is decreasing in alpha; beta only matters through depth 0, i.e. not at all
        return AlphaBetaFit(eps, 1.0, alpha_beta_loglik(eps, 1.0, n_internal, n_leaf), True)
    if np.sum(n_leaf) == 0:
        raise ValueError("no terminal nodes")
    bounds = [(eps, 1.0 - eps), (eps, beta_max)]

    def negll(theta):
        a = min(max(theta[0], eps), 1.0 - eps)
        b = min(max(theta[1], eps), beta_max)
        return -alpha_beta_loglik(a, b, n_internal, n_leaf)

    best = None
    for start in ALPHA_BETA_STARTS:
        res = optimize.minimize(negll, np.array(start), method="Nelder-Mead", bounds=bounds,
                                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        if best is None or res.fun < best.fun:
            best = res
    polish = optimize.minimize(negll, best.x, method="L-BFGS-B", bounds=bounds)
    if polish.success and polish.fun < best.fun:
        best = polish
    if not np.all(np.isfinite(best.x)) or not math.isfinite(best.fun):
        raise ConvergenceError("alpha/beta optimisation failed")
    a = float(np.clip(best.x[0], eps, 1.0 - eps))
    b = float(np.clip(best.x[1], eps, beta_max))
    edge = 1e-6
    at_boundary = a <= eps + edge or a >= 1.0 - eps - edge or b >= beta_max - edge or b <= eps + edge
    return AlphaBetaFit(a, b, -float(best.fun), bool(at_boundary))


def update_alpha_beta(draws) -> AlphaBetaFit:
    """Joint ML (alpha, beta) from the node depths in ``draws`` (a DrawSet or a list of trees)."""
    n_internal, n_leaf = draws.depth_counts() if isinstance(draws, DrawSet) else depth_counts(draws)
    return fit_alpha_beta(n_internal, n_leaf)


def update_alpha(draws, beta: float, eps: float = ALPHA_EPS) -> AlphaBetaFit:
    """ML alpha with beta held fixed."""
    n_internal, n_leaf = draws.depth_counts() if isinstance(draws, DrawSet) else depth_counts(draws)
    if np.sum(n_internal) == 0:
        return AlphaBetaFit(eps, beta, alpha_beta_loglik(eps, beta, n_internal, n_leaf), True)
    res = optimize.minimize_scalar(lambda a: -alpha_beta_loglik(a, beta, n_internal, n_leaf),
                                   bounds=(eps, 1.0 - eps), method="bounded", options={"xatol": 1e-10})
    if not res.success:
        raise ConvergenceError("alpha optimisation failed")
    a = float(res.x)
    return AlphaBetaFit(a, beta, -float(res.fun), a <= eps + 1e-6 or a >= 1.0 - eps - 1e-6)
