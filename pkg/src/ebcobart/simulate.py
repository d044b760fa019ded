"""Simulation designs and the replicate experiment runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .codata import CONTINUOUS, CoDataMatrix, bucket_groups, build_grouping_codata, combine_codata, contiguous_groups, group_weights
from .orchestrator import RunConfig, eb_cobart_fit, fit_plain_bart, predict
from .sampler import ChainConfig, Dataset, chain_rng, max_workers

log = logging.getLogger(__name__)

REGIMES = ("sparse-nonlinear", "dense-linear", "uninformative")

# generator streams below the master seed; train and test never share one
STREAM_TRAIN, STREAM_TEST, STREAM_EFFECTS = 1, 2, 3

BUDGETS = {
    "smoke": {"chain": {"n_chains": 2, "n_samples": 150, "n_burnin": 50}, "max_iterations": 3, "K": 20},
    "desk": {"chain": {"n_chains": 4, "n_samples": 2500, "n_burnin": 500}, "max_iterations": 20, "K": 50},
    "full": {"chain": {"n_chains": 10, "n_samples": 10000, "n_burnin": 2000}, "max_iterations": 20, "K": 50},
}


class SimData(NamedTuple):
    train: Dataset
    test: Dataset
    f_train: np.ndarray
    f_test: np.ndarray
    codata: CoDataMatrix
    groups: np.ndarray
    theta: Optional[np.ndarray] = None


def _rng(seed, stream):
    if isinstance(seed, np.random.Generator):
        return seed
    return chain_rng(seed, stream)


def sparse_nonlinear_f(X) -> np.ndarray:
    x = lambda j: X[:, j - 1]  # noqa: E731  (1-based covariate index)
    return 10 * np.sin(np.pi * x(1) * x(2)) + 10 * x(3) + 20 * (x(101) - 0.5) ** 2 + 10 * x(102)


def uninformative_f(X) -> np.ndarray:
    f = np.zeros(X.shape[0])
    for off in range(0, 500, 100):
        x = lambda j: X[:, off + j - 1]  # noqa: E731
        f += 10 * np.sin(np.pi * x(1) * x(2)) + 20 * (x(3) - 0.5) ** 2 + 10 * x(4) + 10 * x(5)
    return f


def gen_sparse_nonlinear(N: int, p: int = 500, seed=0):
    """Uniform covariates, response driven by covariates 1, 2, 3, 101, 102 plus N(0, 1) noise.

    Returns ``(Dataset, f)`` with ``f`` the noise-free function values.
    """
    if p < 102:
        raise ValueError("the sparse design needs p >= 102")
    rng = _rng(seed, STREAM_TRAIN)
    X = rng.uniform(size=(N, p))
    f = sparse_nonlinear_f(X)
    return Dataset(X, f + rng.standard_normal(N)), f


def draw_theta(p: int, rng) -> np.ndarray:
    return np.sort(rng.exponential(1.0, size=p))[::-1].copy()


def dense_codata(theta, noise_frac: float, rng) -> CoDataMatrix:
    noisy = theta + rng.standard_normal(theta.size) * noise_frac * np.std(theta)
    return CoDataMatrix(noisy[:, None], ("effect",), (CONTINUOUS,))


def dense_design(N: int, theta, rng):
    X = rng.standard_normal((N, theta.size))
    f = X @ theta
    return Dataset(X, f + rng.standard_normal(N)), f


def gen_dense_linear(N: int, p: int = 500, noise_frac: float = 0.2, seed=0):
    """Standard-normal covariates with decreasing Expo(1) effects ``theta``.

    The co-data column is ``theta`` plus N(0, (noise_frac * sd(theta))^2)
    noise.  Returns ``(Dataset, CoDataMatrix, theta, f)``.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    eff = _rng(seed, STREAM_EFFECTS)
    theta = draw_theta(p, eff)
    C = dense_codata(theta, noise_frac, eff)
    data, f = dense_design(N, theta, _rng(seed, STREAM_TRAIN))
    return data, C, theta, f


def gen_uninformative(N: int, seed=0):
    """Five identical additive blocks at covariates 1-5, 101-105, ..., 401-405 (p = 500).

    Returns ``(Dataset, group_of, f)`` with 100 consecutive covariates per group.
    """
    rng = _rng(seed, STREAM_TRAIN)
    X = rng.uniform(size=(N, 500))
    f = uninformative_f(X)
    return Dataset(X, f + rng.standard_normal(N)), contiguous_groups(500, 5), f


def pmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    return math.fsum((y_true - y_pred) ** 2) / y_true.size


def simulate_replicate(regime: str, N: int, G: int, seed, n_test: int = 500, p: int = 500,
                       noise_frac: float = 0.2) -> SimData:
    """Train set, independent test set and co-data for one replicate."""
    tr = chain_rng(seed, STREAM_TRAIN)
    te = chain_rng(seed, STREAM_TEST)
    if regime == "sparse-nonlinear":
        (train, f_tr), (test, f_te) = gen_sparse_nonlinear(N, p, tr), gen_sparse_nonlinear(n_test, p, te)
        groups = contiguous_groups(p, G)
        return SimData(train, test, f_tr, f_te, build_grouping_codata(p, groups), groups)
    if regime == "uninformative":
        train, groups, f_tr = gen_uninformative(N, tr)
        test, _, f_te = gen_uninformative(n_test, te)
        return SimData(train, test, f_tr, f_te, build_grouping_codata(500, groups), groups)
    if regime == "dense-linear":
        eff = chain_rng(seed, STREAM_EFFECTS)
        theta = draw_theta(p, eff)
        C = dense_codata(theta, noise_frac, eff)
        (train, f_tr), (test, f_te) = dense_design(N, theta, tr), dense_design(n_test, theta, te)
        return SimData(train, test, f_tr, f_te, combine_codata([C]), bucket_groups(p), theta)
    raise ValueError(f"unknown regime {regime!r}; choose from {REGIMES}")


@dataclass(frozen=True)
class ExperimentSettings:
    N: int = 100
    G: tuple = (5,)
    presets: tuple = ("rigid", "flexible")
    budget: str = "desk"
    n_test: int = 500
    p: int = 500
    noise_frac: float = 0.2
    max_iterations: Optional[int] = None
    update_alpha_k: bool = False

    def __post_init__(self):
        if self.budget not in BUDGETS:
            raise ValueError(f"unknown budget {self.budget!r}; choose from {sorted(BUDGETS)}")
        object.__setattr__(self, "G", tuple(int(g) for g in np.atleast_1d(self.G)))
        object.__setattr__(self, "presets", tuple(self.presets))

    def run_config(self, preset: str, seed: int) -> RunConfig:
        b = BUDGETS[self.budget]
        chain = ChainConfig(seed=seed, **b["chain"])
        iters = self.max_iterations if self.max_iterations is not None else b["max_iterations"]
        return RunConfig(preset=preset, update_alpha_k=self.update_alpha_k, max_iterations=iters, K=b["K"], chain=chain)


CSV_FIELDS = ("regime", "replicate", "seed", "N", "G", "preset", "method", "status", "pmse", "ratio",
              "selected_iteration", "n_iterations", "group_weights", "error")


def replicate_seed(master: int, replicate: int) -> int:
    """64-bit seed of replicate ``r``: first word of SeedSequence([master, r])."""
    return int(np.random.SeedSequence([int(master), int(replicate)]).generate_state(1, np.uint64)[0])


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def run_replicate(regime: str, settings: ExperimentSettings, replicate: int, master_seed: int) -> list:
    seed = replicate_seed(master_seed, replicate)
    rows = []
    base = {"regime": regime, "replicate": replicate, "seed": seed, "N": settings.N}
    # the uninformative design is fixed at G = 5; dense-linear summarises 10 buckets
    Gs = (5,) if regime == "uninformative" else ((10,) if regime == "dense-linear" else settings.G)
    cache = {}
    for G in Gs:
        try:
            sim = simulate_replicate(regime, settings.N, G, seed, settings.n_test, settings.p, settings.noise_frac)
        except Exception as exc:  # recorded, not dropped
            for preset in settings.presets:
                for method in ("BART", "EB-coBART"):
                    rows.append({**base, "G": G, "preset": preset, "method": method, "status": "failed",
                                 "error": f"{type(exc).__name__}: {exc}"})
            continue
        n_groups = int(sim.groups.max()) + 1
        for preset in settings.presets:
            cfg = settings.run_config(preset, seed)
            row = {**base, "G": G, "preset": preset}
            try:
                if preset not in cache:
                    plain = fit_plain_bart(sim.train, cfg)
                    cache[preset] = (plain, pmse(sim.test.y, predict(plain, sim.test.X)[0]))
                plain, pmse_bart = cache[preset]
                uniform = group_weights(np.full(sim.train.p, 1.0 / sim.train.p), sim.groups, n_groups)
                rows.append({**row, "method": "BART", "status": "ok", "pmse": pmse_bart, "ratio": 1.0,
                             "selected_iteration": 0, "n_iterations": 1, "group_weights": uniform})
            except Exception as exc:
                for method in ("BART", "EB-coBART"):
                    rows.append({**row, "method": method, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
                continue
            try:
                res = eb_cobart_fit(sim.train, sim.codata, cfg, initial=plain)
                pm = pmse(sim.test.y, predict(res.best, sim.test.X)[0])
                sel = res.history[res.selected]
                gw = group_weights(sel.codata_fit.weights, sim.groups, n_groups)
                rows.append({**row, "method": "EB-coBART", "status": "ok", "pmse": pm, "ratio": pm / pmse_bart,
                             "selected_iteration": res.selected, "n_iterations": len(res.history),
                             "group_weights": gw})
            except Exception as exc:
                rows.append({**row, "method": "EB-coBART", "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            log.info("replicate %d G=%d %s done", replicate, G, preset)
    return rows


def run_experiment(regime: str, settings: ExperimentSettings, replicates: int, seed: int) -> list:
    """One row per replicate x co-data setting x preset x method, in a fixed order."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; choose from {REGIMES}")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    workers = max_workers(replicates)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_rep = list(pool.map(lambda r: run_replicate(regime, settings, r, seed), range(replicates)))
    else:
        per_rep = [run_replicate(regime, settings, r, seed) for r in range(replicates)]
    return [row for rows in per_rep for row in rows]


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        out = {k: row.get(k, "") for k in CSV_FIELDS}
        for k in ("pmse", "ratio"):
            out[k] = _fmt(row.get(k))
        gw = row.get("group_weights")
        out["group_weights"] = "" if gw is None else ";".join(repr(float(v)) for v in gw)
        w.writerow(out)
    return buf.getvalue()


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"n": 0, "mean": None, "median": None, "q25": None, "q75": None}
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
            "q25": float(np.quantile(v, 0.25)), "q75": float(np.quantile(v, 0.75))}


def summarize(rows: Sequence[dict], regime: str, settings: ExperimentSettings, replicates: int, seed: int) -> dict:
    """Means, medians and quartiles per (G, preset, method) cell."""
    cells = []
    keys = sorted({(r["G"], r["preset"], r["method"]) for r in rows}, key=lambda k: (k[0], k[1], k[2]))
    for G, preset, method in keys:
        sel = [r for r in rows if (r["G"], r["preset"], r["method"]) == (G, preset, method)]
        ok = [r for r in sel if r["status"] == "ok"]
        gw = np.array([r["group_weights"] for r in ok]) if ok else np.zeros((0, 0))
        cells.append({
            "G": int(G), "preset": preset, "method": method, "n_ok": len(ok), "n_failed": len(sel) - len(ok),
            "pmse": _stats([r["pmse"] for r in ok]),
            "ratio": _stats([r["ratio"] for r in ok]),
            "selected_iteration": _stats([r["selected_iteration"] for r in ok]),
            "group_weights_mean": [float(v) for v in gw.mean(axis=0)] if len(ok) else [],
            "group_weights_median": [float(v) for v in np.median(gw, axis=0)] if len(ok) else [],
        })
    return {"regime": regime, "seed": int(seed), "replicates": int(replicates),
            "settings": {"N": settings.N, "G": list(settings.G), "presets": list(settings.presets),
                         "budget": settings.budget, "n_test": settings.n_test, "p": settings.p,
                         "max_iterations": settings.max_iterations, "update_alpha_k": settings.update_alpha_k},
            "cells": cells}


def summary_schema() -> dict:
    return json.loads(resources.files("ebcobart").joinpath("data/experiment_summary.schema.json").read_text())
