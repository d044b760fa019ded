"""Backfitting Metropolis-Hastings-within-Gibbs sampler for the BART posterior."""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import kernels
from .trees import Forest, Hyperparams, Tree, predict_forest, predict_tree

CONTINUOUS = "continuous"
BINARY = "binary"

# floor on the scaled-response variance; keeps sigma2 and lambda positive for constant y
VAR_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    response_kind: str = CONTINUOUS

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64).ravel()
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("need at least one row and one covariate")
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"y has {y.shape[0]} entries, X has {X.shape[0]} rows")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        if self.response_kind not in (CONTINUOUS, BINARY):
            raise ValueError(f"unknown response kind {self.response_kind!r}")
        if self.response_kind == BINARY and not np.all((y == 0) | (y == 1)):
            raise ValueError("binary response must be coded 0/1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows], self.response_kind)


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 4
    n_samples: int = 2500
    n_burnin: int = 500
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 <= self.n_burnin < self.n_samples:
            raise ValueError("need 0 <= n_burnin < n_samples")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def draws_per_chain(self) -> int:
        return -(-(self.n_samples - self.n_burnin) // self.thin)


def chain_rng(seed: int, *path: int) -> np.random.Generator:
    """Counter-based (Philox) stream for ``seed`` split along ``path``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, path)])))


def max_workers(n_tasks: int) -> int:
    env = os.environ.get("EBCOBART_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


def cutpoints(X) -> list:
    """Admissible cut values per covariate: the distinct observed values except the largest."""
    X = np.asarray(X, dtype=np.float64)
    return [np.unique(X[:, j])[:-1] for j in range(X.shape[1])]


def flat_cutpoints(cuts):
    ptr = np.zeros(len(cuts) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(c) for c in cuts])
    values = np.concatenate(cuts) if len(cuts) else np.zeros(0)
    return np.ascontiguousarray(values, dtype=np.float64), ptr


def response_scaling(y) -> tuple:
    lo, hi = float(np.min(y)), float(np.max(y))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def scale_response(y, scaling) -> np.ndarray:
    lo, hi = scaling
    return (np.asarray(y, dtype=np.float64) - lo) / (hi - lo) - 0.5


def unscale_response(g, scaling) -> np.ndarray:
    lo, hi = scaling
    return (np.asarray(g) + 0.5) * (hi - lo) + lo


def scaled_variance(y_scaled) -> float:
    y_scaled = np.asarray(y_scaled)
    v = float(np.var(y_scaled, ddof=1)) if y_scaled.size > 1 else 0.0
    return max(v, VAR_FLOOR)


def default_lambda(y_scaled, nu: float = 10.0, quantile: float = 0.75, fraction: float = 2.0 / 3.0) -> float:
    """lambda placing the ``quantile`` of the IG(nu/2, nu*lambda/2) prior at ``fraction * Var(y)``."""
    target = fraction * scaled_variance(y_scaled)
    # P(sigma2 <= x) = P(Gamma(nu/2, rate=nu*lam/2) >= 1/x)
    return 2.0 * target * stats.gamma.ppf(1.0 - quantile, nu / 2.0) / nu


# --------------------------------------------------------------------------
# draws


@dataclass(eq=False)
class DrawSet:
    """Retained posterior draws of all chains, concatenated chain by chain.

    Trees are packed in preorder buffers; tree ``t`` of draw ``d`` spans
    ``tree_ptr[d*K + t] : tree_ptr[d*K + t + 1]``.  Leaf values, ``sigma2``
    and ``fit_mean`` are on the internal (scaled or latent) scale;
    ``loglik`` is on the original response scale.
    """

    K: int
    n_features: int
    response_kind: str
    scaling: Optional[tuple]
    hyper: Hyperparams
    sigma_mu: float
    chain: np.ndarray
    sweep: np.ndarray
    tree_ptr: np.ndarray
    node_var: np.ndarray
    node_value: np.ndarray
    node_right: np.ndarray
    node_depth: np.ndarray
    sigma2: np.ndarray
    fit_mean: np.ndarray
    loglik: np.ndarray
    moves: np.ndarray = field(default_factory=lambda: np.zeros((0, 6), dtype=np.int64))

    @property
    def n_draws(self) -> int:
        return len(self.sigma2)

    @property
    def n_chains(self) -> int:
        return len(np.unique(self.chain))

    def tree(self, d: int, t: int) -> Tree:
        a, b = self.tree_ptr[d * self.K + t], self.tree_ptr[d * self.K + t + 1]
        return Tree(self.node_var[a:b], self.node_value[a:b], self.node_right[a:b], self.node_depth[a:b])

    def forest(self, d: int) -> Forest:
        return Forest([self.tree(d, t) for t in range(self.K)], float(self.sigma2[d]), self.n_features, self.scaling)

    def _node_draw(self) -> np.ndarray:
        nodes_per_draw = np.diff(self.tree_ptr[:: self.K])
        return np.repeat(np.arange(self.n_draws), nodes_per_draw)

    def split_counts(self) -> np.ndarray:
        """Per-draw counts of splitting rules on each covariate, shape (n_draws, p)."""
        internal = self.node_var >= 0
        flat = self._node_draw()[internal] * self.n_features + self.node_var[internal]
        counts = np.bincount(flat, minlength=self.n_draws * self.n_features)
        return counts.reshape(self.n_draws, self.n_features)

    def leaf_values(self) -> np.ndarray:
        return self.node_value[self.node_var < 0]

    def leaf_counts(self) -> np.ndarray:
        leaves = self.node_var < 0
        return np.bincount(self._node_draw()[leaves], minlength=self.n_draws)

    def depth_counts(self):
        """(internal-node counts, leaf counts) indexed by depth, pooled over all draws."""
        internal = self.node_var >= 0
        size = int(self.node_depth.max()) + 1 if len(self.node_depth) else 1
        return (np.bincount(self.node_depth[internal], minlength=size),
                np.bincount(self.node_depth[~internal], minlength=size))

    def sigma2_original(self) -> np.ndarray:
        if self.scaling is None:
            return self.sigma2.copy()
        lo, hi = self.scaling
        return self.sigma2 * (hi - lo) ** 2

    def predict_latent(self, X) -> np.ndarray:
        """Per-draw sum-of-trees on the internal scale, shape (n_draws, n_rows)."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"X must have {self.n_features} columns, got shape {X.shape}")
        if _use_numpy_predict():
            return kernels.predict_draws_numpy(self.tree_ptr, self.node_var, self.node_value, self.node_right, self.K, X)
        return kernels.predict_draws(self.tree_ptr, self.node_var, self.node_value, self.node_right, self.K, X)

    def predict_draws(self, X) -> np.ndarray:
        """Per-draw predictions on the response scale (probabilities for binary)."""
        g = self.predict_latent(X)
        if self.response_kind == BINARY:
            return stats.norm.cdf(g)
        return unscale_response(g, self.scaling)

    def select(self, idx) -> "DrawSet":
        """Sub-DrawSet of the draws at ``idx`` (in the given order)."""
        idx = np.asarray(idx, dtype=np.int64)
        starts = self.tree_ptr[idx * self.K]
        stops = self.tree_ptr[(idx + 1) * self.K]
        node_idx = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)]) if len(idx) else np.zeros(0, np.int64)
        sizes = np.concatenate([np.diff(self.tree_ptr[d * self.K:(d + 1) * self.K + 1]) for d in idx]) if len(idx) else np.zeros(0, np.int64)
        ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        return DrawSet(self.K, self.n_features, self.response_kind, self.scaling, self.hyper, self.sigma_mu,
                       self.chain[idx], self.sweep[idx], ptr, self.node_var[node_idx], self.node_value[node_idx],
                       self.node_right[node_idx], self.node_depth[node_idx], self.sigma2[idx], self.fit_mean[idx],
                       self.loglik[idx], self.moves)

    def chain_traces(self, values) -> list:
        return [values[self.chain == c] for c in np.unique(self.chain)]

    def digest(self) -> str:
        """SHA-256 over every stored array; equal digests mean bit-identical draws."""
        h = hashlib.sha256()
        for a in (self.chain, self.sweep, self.tree_ptr, self.node_var, self.node_value, self.node_right,
                  self.node_depth, self.sigma2, self.fit_mean, self.loglik):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def write_trace(self, fh) -> None:
        """Newline-delimited JSON, one record per retained draw."""
        counts = self.split_counts()
        leaves = self.leaf_counts()
        for d in range(self.n_draws):
            rec = {"iteration": int(self.sweep[d]), "chain": int(self.chain[d]), "sigma2": float(self.sigma2_original()[d]),
                   "total_leaves": int(leaves[d]), "b": counts[d].tolist()}
            fh.write(json.dumps(rec) + "\n")


def _use_numpy_predict() -> bool:
    from ._jit import HAS_NUMBA

    return not HAS_NUMBA


def concat_drawsets(parts: Sequence[DrawSet]) -> DrawSet:
    first = parts[0]
    offsets = np.cumsum([0] + [len(p.node_var) for p in parts[:-1]])
    ptr = np.concatenate([parts[0].tree_ptr[:1]] + [p.tree_ptr[1:] + o for p, o in zip(parts, offsets)])
    return DrawSet(
        first.K, first.n_features, first.response_kind, first.scaling, first.hyper, first.sigma_mu,
        np.concatenate([p.chain for p in parts]), np.concatenate([p.sweep for p in parts]), ptr,
        np.concatenate([p.node_var for p in parts]), np.concatenate([p.node_value for p in parts]),
        np.concatenate([p.node_right for p in parts]), np.concatenate([p.node_depth for p in parts]),
        np.concatenate([p.sigma2 for p in parts]), np.concatenate([p.fit_mean for p in parts]),
        np.concatenate([p.loglik for p in parts]), np.concatenate([p.moves for p in parts]),
    )


# --------------------------------------------------------------------------
# single-step operations


def residual(y, forest: Forest, t: int, X) -> np.ndarray:
    """Response minus every tree except ``t``."""
    if not 0 <= t < forest.K:
        raise IndexError(f"tree index {t} out of range for K={forest.K}")
    X = np.asarray(X, dtype=np.float64)
    others = predict_forest(forest, X) - np.array([predict_tree(forest.trees[t], x) for x in X])
    return np.asarray(y, dtype=np.float64) - others


def node_marginal_loglik(r, sigma2: float, sigma_mu2: float) -> float:
    """log of the normal likelihood of ``r`` with its common mean integrated over N(0, sigma_mu2)."""
    if not (sigma2 > 0 and sigma_mu2 > 0):
        raise ValueError("variances must be positive")
    r = np.asarray(r, dtype=np.float64)
    n = r.size
    if n == 0:
        return 0.0
    s = float(np.sum(r))
    ssr = float(np.sum(r * r))
    denom = sigma2 + n * sigma_mu2
    return (-0.5 * n * math.log(2 * math.pi * sigma2) + 0.5 * math.log(sigma2 / denom)
            - ssr / (2 * sigma2) + sigma_mu2 * s * s / (2 * sigma2 * denom))


class _Arena:
    """A single tree loaded into kernel arena arrays."""

    def __init__(self, tree: Tree, X):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        N = self.X.shape[0]
        n = len(tree)
        cap = max(2 * N + 1, n + 2)
        (self.var, self.cut, self.mu, self.left, self.right, self.parent, self.depth,
         self.n_used) = kernels.new_arena(1, cap)
        self.var[0, :n] = tree.var
        internal = tree.var >= 0
        self.cut[0, :n] = np.where(internal, tree.value, 0.0)
        self.mu[0, :n] = np.where(internal, 0.0, tree.value)
        self.left[0, :n] = np.where(internal, np.arange(n) + 1, -1)
        self.right[0, :n] = np.where(internal, tree.right, -1)
        self.depth[0, :n] = tree.depth
        for k in np.flatnonzero(internal):
            self.parent[0, k + 1] = k
            self.parent[0, tree.right[k]] = k
        self.n_used[0] = n
        self.leaf_of = np.array([[kernels._route_from(0, self.var, self.cut, self.left, self.right, 0, self.X, i)
                                  for i in range(N)]], dtype=np.int32)
        self.cap = cap

    def to_tree(self) -> Tree:
        size = self.cap
        out_var = np.empty(size, np.int32)
        out_val = np.empty(size)
        out_right = np.empty(size, np.int32)
        out_depth = np.empty(size, np.int32)
        stack = np.zeros(size + 2, np.int64)
        patch = np.zeros(size + 2, np.int64)
        pos = kernels.write_preorder(0, self.var, self.cut, self.mu, self.left, self.right, self.depth,
                                     out_var, out_val, out_right, out_depth, 0, stack, patch)
        return Tree(out_var[:pos], out_val[:pos], out_right[:pos], out_depth[:pos])


def propose_and_accept_tree(tree: Tree, X, r, sigma2: float, hyper: Hyperparams, sigma_mu: float,
                            rng: np.random.Generator, cuts=None) -> Tree:
    """One MH tree-structure update against residual ``r``; returns the input on rejection.

    Leaves created by an accepted GROW or PRUNE carry value 0 until redrawn.
    """
    arena = _Arena(tree, X)
    r = np.ascontiguousarray(r, dtype=np.float64)
    if r.shape[0] != arena.X.shape[0]:
        raise ValueError("residual length must match the number of rows of X")
    cut_values, cut_ptr = flat_cutpoints(cutpoints(arena.X) if cuts is None else cuts)
    cap = arena.cap
    moves = np.zeros(6, np.int64)
    kernels.mh_step(0, arena.var, arena.cut, arena.mu, arena.left, arena.right, arena.parent, arena.depth,
                    arena.n_used, arena.leaf_of, r, arena.X, cut_values, cut_ptr, np.cumsum(hyper.s),
                    hyper.alpha, hyper.beta, sigma2, sigma_mu ** 2, rng, np.zeros(cap), np.zeros(cap),
                    np.zeros(cap), np.zeros(cap), np.zeros(len(r), np.int32), moves)
    if moves[3:].sum() == 0:
        return tree
    return arena.to_tree()


def draw_leaf_values(tree: Tree, X, r, sigma2: float, sigma_mu: float, rng: np.random.Generator) -> Tree:
    """Redraw every leaf from its conjugate normal posterior given the routed residuals."""
    arena = _Arena(tree, X)
    r = np.ascontiguousarray(r, dtype=np.float64)
    cap = arena.cap
    kernels.draw_leaf_values(0, arena.var, arena.mu, arena.n_used, arena.leaf_of, r, sigma2, sigma_mu ** 2, rng,
                             np.zeros(cap), np.zeros(cap))
    return arena.to_tree()


def draw_sigma2(y, yhat, nu: float, lam: float, rng: np.random.Generator, response_kind: str = CONTINUOUS) -> float:
    """One draw from IG((N + nu)/2, (nu*lam + SSR)/2)."""
    if response_kind != CONTINUOUS:
        raise TypeError("sigma2 is fixed to 1 for binary responses")
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError("y and yhat must have equal length")
    ssr = float(np.sum((y - yhat) ** 2))
    shape = 0.5 * (y.size + nu)
    scale = 0.5 * (nu * lam + ssr)
    return scale / rng.gamma(shape, 1.0)


def draw_latent_probit(y, g, rng: np.random.Generator) -> np.ndarray:
    y = np.ascontiguousarray(y, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if y.shape != g.shape:
        raise ValueError("y and g must have equal length")
    z = np.empty_like(g)
    kernels.draw_latent(y, g, z, rng)
    return z


# --------------------------------------------------------------------------
# chains


def run_chains(data: Dataset, hyper: Hyperparams, K: int, cfg: ChainConfig, *, update_sigma2: bool = True,
               check: bool = False, stream: Sequence[int] = ()) -> DrawSet:
    """Run ``cfg.n_chains`` independent chains and pool their retained draws.

    Chain ``c`` draws from ``chain_rng(cfg.seed, *stream, c)``.  ``check``
    re-verifies the backfitting bookkeeping after every sweep.
    """
    if hyper.p != data.p:
        raise ValueError(f"hyperparameters are for p={hyper.p}, data has p={data.p}")
    if K < 1:
        raise ValueError("K must be >= 1")
    binary = data.response_kind == BINARY
    if binary:
        scaling = None
        y = data.y
        shift = 0.0
        sigma2_init = 1.0
    else:
        scaling = response_scaling(data.y)
        y = scale_response(data.y, scaling)
        shift = -math.log(scaling[1] - scaling[0])
        sigma2_init = scaled_variance(y)
    y = np.ascontiguousarray(y)
    sigma_mu = hyper.sigma_mu(K, data.response_kind)
    cut_values, cut_ptr = flat_cutpoints(cutpoints(data.X))
    s_cum = np.ascontiguousarray(np.cumsum(hyper.s))

    def one(c):
        rng = chain_rng(cfg.seed, *stream, c)
        return kernels.run_chain(data.X, y, binary, cut_values, cut_ptr, s_cum, hyper.alpha, hyper.beta,
                                 sigma_mu, hyper.nu, hyper.lam, sigma2_init, K, cfg.n_samples, cfg.n_burnin,
                                 cfg.thin, rng, shift, update_sigma2, check)

    workers = max_workers(cfg.n_chains)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(one, range(cfg.n_chains)))
    else:
        outs = [one(c) for c in range(cfg.n_chains)]

    parts = []
    sweeps = cfg.n_burnin + cfg.thin * np.arange(cfg.draws_per_chain)
    for c, (ptr, var, val, right, depth, sig, fit_mean, ll, moves) in enumerate(outs):
        parts.append(DrawSet(K, data.p, data.response_kind, scaling, hyper, sigma_mu,
                             np.full(len(sig), c, dtype=np.int64), sweeps.astype(np.int64), ptr, var, val, right,
                             depth, sig, fit_mean, ll, moves[None, :]))
    return concat_drawsets(parts)


def gelman_rubin(traces) -> float:
    """Potential scale reduction factor sqrt(V / W) (no split chains, no df correction)."""
    chains = [np.asarray(t, dtype=np.float64) for t in traces]
    if len(chains) < 2:
        raise ValueError("need at least two chains")
    n = len(chains[0])
    if n < 2 or any(len(c) != n for c in chains):
        raise ValueError("chains must have equal length >= 2")
    arr = np.vstack(chains)
    W = float(np.mean(np.var(arr, axis=1, ddof=1)))
    B = n * float(np.var(arr.mean(axis=1), ddof=1))
    if W <= 0.0:
        raise ValueError("zero within-chain variance: diagnostic undefined")
    V = (n - 1) / n * W + B / n
    return math.sqrt(V / W)
