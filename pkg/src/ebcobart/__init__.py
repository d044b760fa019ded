"""Bayesian additive regression trees with co-data guided empirical-Bayes covariate weights."""

from ._jit import backend
from .codata import CoDataFit, CoDataMatrix, build_grouping_codata, combine_codata, fit_codata_model, predict_weights
from .eb import count_splits, s1_estimate, update_alpha, update_alpha_beta, update_k, update_nu_lambda
from .orchestrator import FitResult, IterationRecord, RunConfig, eb_cobart_fit, fit_plain_bart, predict
from .sampler import ChainConfig, Dataset, DrawSet, gelman_rubin, run_chains
from .selection import WaicResult, cv_criterion, select_minimum, waic
from .trees import Forest, Hyperparams, SplitRule, Tree, log_prior_leaves, log_prior_tree, predict_forest, predict_tree

__version__ = "0.1.0"

__all__ = [
    "backend", "CoDataFit", "CoDataMatrix", "build_grouping_codata", "combine_codata", "fit_codata_model",
    "predict_weights", "count_splits", "s1_estimate", "update_alpha", "update_alpha_beta", "update_k",
    "update_nu_lambda", "FitResult", "IterationRecord", "RunConfig", "eb_cobart_fit", "fit_plain_bart", "predict",
    "ChainConfig", "Dataset", "DrawSet", "gelman_rubin", "run_chains", "WaicResult", "cv_criterion",
    "select_minimum", "waic", "Forest", "Hyperparams", "SplitRule", "Tree", "log_prior_leaves", "log_prior_tree",
    "predict_forest", "predict_tree",
]
