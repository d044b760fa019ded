"""Model-selection criteria used to stop the empirical-Bayes loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .sampler import ChainConfig, Dataset, chain_rng, run_chains
from .trees import Hyperparams

# stream label separating the fold permutation from the sampler streams
CV_STREAM = 0xC5


@dataclass(frozen=True, eq=False)
class WaicResult:
    waic: float
    lppd: float
    p_waic: float
    pointwise: np.ndarray


def waic(loglik) -> WaicResult:
    """WAIC from a (draws x N) matrix of pointwise log likelihoods.

    ``pointwise`` holds each observation's contribution to ``waic``.
    """
    ll = np.asarray(loglik, dtype=np.float64)
    if ll.ndim != 2:
        raise ValueError("log likelihood must be a draws x N matrix")
    S = ll.shape[0]
    if S < 2:
        raise ValueError("pointwise variance needs at least two draws")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log likelihood contains non-finite values")
    lppd_i = logsumexp(ll, axis=0) - np.log(S)
    # centring on the first draw makes constant columns give exactly zero
    p_i = np.var(ll - ll[0], axis=0, ddof=1)
    pointwise = -2.0 * lppd_i + 2.0 * p_i
    lppd = float(np.sum(lppd_i))
    p_waic = float(np.sum(p_i))
    return WaicResult(-2.0 * lppd + 2.0 * p_waic, lppd, p_waic, pointwise)


def select_minimum(history) -> int:
    """Iteration with the smallest criterion; ties go to the earliest.

    ``history`` holds ``(iteration, value)`` pairs or bare values (indexed by position).
    """
    pairs = [h if isinstance(h, (tuple, list)) else (i, h) for i, h in enumerate(history)]
    if not pairs:
        raise ValueError("empty history")
    best_it, best_val = pairs[0]
    for it, val in pairs[1:]:
        if val < best_val:
            best_it, best_val = it, val
    return int(best_it)


def fold_assignment(N: int, folds: int, seed: int) -> np.ndarray:
    """Fold label per row: a seeded permutation cut into near-equal parts."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if folds > N:
        raise ValueError(f"{folds} folds leave some fold without observations (N={N})")
    perm = chain_rng(seed, CV_STREAM).permutation(N)
    labels = np.empty(N, dtype=np.int64)
    for f, idx in enumerate(np.array_split(perm, folds)):
        labels[idx] = f
    return labels


def cv_criterion(data: Dataset, hyper: Hyperparams, K: int, folds: int, cfg: ChainConfig,
                 stream=()) -> float:
    """Mean held-out PMSE (continuous) or Brier score (binary) over ``folds`` folds."""
    labels = fold_assignment(data.N, folds, cfg.seed)
    losses = []
    for f in range(folds):
        test = labels == f
        if not test.any():
            raise ValueError(f"fold {f} has no observations")
        train = data.subset(~test)
        draws = run_chains(train, hyper, K, cfg, stream=(*stream, CV_STREAM, f))
        pred = draws.predict_draws(data.X[test]).mean(axis=0)
        # squared error on 0/1 labels with probability predictions is the Brier score
        losses.append(float(np.mean((data.y[test] - pred) ** 2)))
    return float(np.mean(losses))
