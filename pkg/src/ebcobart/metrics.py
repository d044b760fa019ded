"""Predictive performance metrics and partial dependence."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .sampler import BINARY, DrawSet, unscale_response


def auc(y, score) -> float:
    """Area under the ROC curve via the rank-sum statistic, ties counted as 1/2."""
    y = np.asarray(y, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    if y.shape != score.shape:
        raise ValueError("labels and scores must have equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    n1 = int(np.sum(y == 1))
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(score)  # midranks
    return float((np.sum(ranks[y == 1]) - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def brier(y, prob) -> float:
    y = np.asarray(y, dtype=np.float64)
    prob = np.asarray(prob, dtype=np.float64)
    if y.shape != prob.shape:
        raise ValueError("labels and probabilities must have equal length")
    return math.fsum((prob - y) ** 2) / y.size


class PartialDependence(NamedTuple):
    grid: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    per_draw: np.ndarray  # (n_draws, len(grid))


def partial_dependence(draws: DrawSet, X, var_index: int, grid, response_scale: bool = False) -> PartialDependence:
    """Average sum-of-trees over the rows of ``X`` with covariate ``var_index`` set to each grid value.

    Reported per draw, with mean and standard deviation across draws.  The
    sum of trees is on the internal (latent) scale unless ``response_scale``
    is set for a continuous fit.
    """
    X = np.array(X, dtype=np.float64)
    if not 0 <= var_index < draws.n_features:
        raise IndexError(f"var_index {var_index} out of range for p={draws.n_features}")
    grid = np.asarray(grid, dtype=np.float64).ravel()
    out = np.empty((draws.n_draws, grid.size))
    for g, value in enumerate(grid):
        X[:, var_index] = value
        pred = draws.predict_latent(X)
        if response_scale and draws.response_kind != BINARY:
            pred = unscale_response(pred, draws.scaling)
        out[:, g] = pred.mean(axis=1)
    sd = out.std(axis=0, ddof=1) if draws.n_draws > 1 else np.zeros(grid.size)
    return PartialDependence(grid, out.mean(axis=0), sd, out)
