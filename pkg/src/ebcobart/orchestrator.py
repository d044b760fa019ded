"""The co-data guided empirical-Bayes loop around the BART sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import eb
from .codata import CoDataFit, CoDataMatrix, column_weights, fit_codata_model
from .sampler import BINARY, ChainConfig, Dataset, DrawSet, default_lambda, response_scaling, run_chains, scale_response
from .selection import cv_criterion, select_minimum, waic
from .trees import LEAF_SCALE, Hyperparams

log = logging.getLogger(__name__)

PRESETS = {
    "rigid": {"alpha": 0.1, "beta": 4.0, "k": 1.0},
    "flexible": {"alpha": 0.95, "beta": 2.0, "k": 2.0},
}


class IterationError(RuntimeError):
    def __init__(self, iteration: int, cause: BaseException):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "flexible"
    update_alpha_k: bool = False
    update_nu_lambda: bool = False
    max_iterations: int = 20
    stopping: str = "waic"
    cv_folds: int = 5
    K: int = 50
    nu: float = 10.0
    sigma_quantile: float = 0.75
    chain: ChainConfig = field(default_factory=ChainConfig)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.stopping not in ("waic", "cv"):
            raise ValueError(f"unknown stopping rule {self.stopping!r}")
        if self.stopping == "cv" and self.cv_folds < 2:
            raise ValueError("cv stopping needs at least two folds")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def initial_hyper(self, data: Dataset) -> Hyperparams:
        """Preset tree prior, uniform covariate weights, default sigma2 prior."""
        if data.response_kind == BINARY:
            lam = 1.0
        else:
            lam = default_lambda(scale_response(data.y, response_scaling(data.y)), self.nu, self.sigma_quantile)
        return Hyperparams.uniform(data.p, nu=self.nu, lam=lam, **PRESETS[self.preset])


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    hyper: Hyperparams
    criterion: float
    codata_fit: Optional[CoDataFit]
    group_weight_summary: Optional[np.ndarray]
    n_splits: int
    digest: str

    def to_dict(self, names=None) -> dict:
        out = {"iteration": self.iteration, "criterion": self.criterion, "n_splits": self.n_splits,
               "hyper": self.hyper.to_dict(), "digest": self.digest}
        if self.codata_fit is not None:
            out["eta"] = [float(v) for v in self.codata_fit.eta]
            out["codata_converged"] = bool(self.codata_fit.converged)
            summary = [float(v) for v in self.group_weight_summary]
            out["group_weights"] = dict(zip(names, summary)) if names is not None else summary
        return out


@dataclass(eq=False)
class FitResult:
    best: DrawSet
    history: list
    selected: int

    def __iter__(self):
        return iter((self.best, self.history))

    def report(self, codata: Optional[CoDataMatrix] = None) -> dict:
        names = list(codata.names) if codata is not None else None
        return {"selected_iteration": self.selected,
                "criterion": [r.criterion for r in self.history],
                "iterations": [r.to_dict(names) for r in self.history]}


def _criterion(data, hyper, draws, cfg, q) -> float:
    if cfg.stopping == "waic":
        return waic(draws.loglik).waic
    return cv_criterion(data, hyper, cfg.K, cfg.cv_folds, cfg.chain, stream=(q,))


def fit_plain_bart(data: Dataset, cfg: RunConfig) -> DrawSet:
    """BART with the preset prior and equal covariate weights (iteration 0 of the loop)."""
    return run_chains(data, cfg.initial_hyper(data), cfg.K, cfg.chain, stream=(0,))


def eb_cobart_fit(data: Dataset, codata: Optional[CoDataMatrix], cfg: RunConfig,
                  initial: Optional[DrawSet] = None) -> FitResult:
    """Alternate sampling and co-data re-estimation of the covariate weights.

    Iteration ``q`` samples with chain streams ``(seed, q, chain)``; after
    ``cfg.max_iterations`` the iteration with the smallest criterion (earliest
    on ties) is selected and its draws returned.  ``initial`` may supply the
    iteration-0 draws, which must equal ``fit_plain_bart(data, cfg)``.
    """
    if cfg.max_iterations > 1 and codata is None:
        raise ValueError("co-data required for the empirical-Bayes loop")
    if codata is not None and codata.p != data.p:
        raise ValueError(f"co-data describes {codata.p} covariates, data has {data.p}")
    c_leaf = LEAF_SCALE[data.response_kind]
    hyper = cfg.initial_hyper(data)
    history = []
    best = None
    best_value = np.inf
    for q in range(cfg.max_iterations):
        try:
            if q == 0 and initial is not None:
                draws = initial
            else:
                draws = run_chains(data, hyper, cfg.K, cfg.chain, stream=(q,))
            value = _criterion(data, hyper, draws, cfg, q)
            if not np.isfinite(value):
                raise FloatingPointError("criterion is not finite")
            b, B = eb.count_splits(draws)
            fit = None
            summary = None
            if codata is not None:
                fit = fit_codata_model(codata, b, B)
                summary = column_weights(codata, fit.weights)
        except Exception as exc:
            raise IterationError(q, exc) from exc
        history.append(IterationRecord(q, hyper, float(value), fit, summary, B, draws.digest()))
        log.info("iteration %d: criterion %.4f, %d splits", q, value, B)
        if value < best_value:
            best, best_value = draws, value
        if q + 1 == cfg.max_iterations:
            break
        try:
            changes = {"s": fit.weights}
            if cfg.update_alpha_k:
                changes["alpha"] = eb.update_alpha(draws, hyper.beta).alpha
                changes["k"] = eb.update_k(draws, cfg.K, c_leaf)
            if cfg.update_nu_lambda and data.response_kind != BINARY:
                changes["nu"], changes["lam"] = eb.update_nu_lambda(draws.sigma2)
            hyper = hyper.replace(**changes)
        except Exception as exc:
            raise IterationError(q, exc) from exc
        del draws
    selected = select_minimum([(r.iteration, r.criterion) for r in history])
    return FitResult(best, history, selected)


def predict(draws: DrawSet, X_new):
    """(point predictions, per-draw predictions); binary draws are mapped through the probit before averaging."""
    per_draw = draws.predict_draws(X_new)
    return per_draw.mean(axis=0), per_draw


def with_chain(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, chain=replace(cfg.chain, **changes))
