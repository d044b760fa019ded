"""Run configuration, CSV ingestion and model persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .codata import CONTINUOUS, CoDataMatrix, build_grouping_codata, combine_codata
from .orchestrator import RunConfig
from .sampler import BINARY, CONTINUOUS as CONTINUOUS_RESPONSE, ChainConfig, DrawSet
from .trees import Hyperparams

MODEL_FORMAT = "ebcobart-model"
MODEL_VERSION = 1
DUMMY_SOURCE = "dummy-source"


class InputError(ValueError):
    """Malformed user input (exit status 2 at the command line)."""


@dataclass(frozen=True)
class IOConfig:
    response: str = "y"
    response_kind: str = CONTINUOUS_RESPONSE
    codata_kinds: Optional[dict] = None
    max_saved_draws: int = 1000

    def __post_init__(self):
        if self.response_kind not in (CONTINUOUS_RESPONSE, BINARY):
            raise InputError(f"response_kind must be 'continuous' or 'binary', got {self.response_kind!r}")
        if self.max_saved_draws < 2:
            raise InputError("max_saved_draws must be >= 2")
        for col, kind in (self.codata_kinds or {}).items():
            if kind not in (DUMMY_SOURCE, CONTINUOUS):
                raise InputError(f"co-data column {col!r}: kind must be '{DUMMY_SOURCE}' or '{CONTINUOUS}'")


def _check_keys(d: dict, allowed, where: str):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise InputError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def parse_config(doc: dict):
    """Split a config document into (RunConfig, IOConfig), rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise InputError("config must be a JSON object")
    run_keys = {f.name for f in fields(RunConfig)}
    io_keys = {f.name for f in fields(IOConfig)}
    _check_keys(doc, run_keys | io_keys, "config")
    chain_doc = doc.get("chain", {})
    if not isinstance(chain_doc, dict):
        raise InputError("config.chain must be an object")
    _check_keys(chain_doc, {f.name for f in fields(ChainConfig)}, "config.chain")
    try:
        chain = ChainConfig(**chain_doc)
        run = RunConfig(**{k: v for k, v in doc.items() if k in run_keys and k != "chain"}, chain=chain)
        io_cfg = IOConfig(**{k: v for k, v in doc.items() if k in io_keys})
    except TypeError as exc:
        raise InputError(f"invalid config: {exc}") from None
    except ValueError as exc:
        raise InputError(f"invalid config: {exc}") from None
    return run, io_cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path}: {exc}") from None
    return parse_config(doc)


@dataclass(frozen=True, eq=False)
class Table:
    names: tuple
    rows: list  # raw string cells

    def column(self, name: str) -> list:
        if name not in self.names:
            raise InputError(f"missing column {name!r}")
        j = self.names.index(name)
        return [r[j] for r in self.rows]

    def numeric(self, names) -> np.ndarray:
        out = np.empty((len(self.rows), len(names)))
        for c, name in enumerate(names):
            for i, cell in enumerate(self.column(name)):
                try:
                    out[i, c] = float(cell)
                except ValueError:
                    raise InputError(f"column {name!r}, row {i + 1}: not a number: {cell!r}") from None
        return out


def read_table(path) -> Table:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file, header required") from None
        rows = [r for r in reader if r]
    header = tuple(h.strip() for h in header)
    if len(set(header)) != len(header):
        raise InputError(f"{path}: duplicate column names")
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise InputError(f"{path}, row {i + 1}: expected {len(header)} fields, got {len(r)}")
    return Table(header, rows)


def read_codata(path, kinds: Optional[dict], covariates) -> CoDataMatrix:
    """Co-data CSV with one row per covariate.

    An optional ``covariate`` column aligns rows to covariates by name;
    otherwise rows follow the training column order.  ``kinds`` maps each
    used column to 'dummy-source' (group labels, dummy coded) or 'continuous'.
    """
    table = read_table(path)
    covariates = list(covariates)
    if "covariate" in table.names:
        names = table.column("covariate")
        if sorted(names) != sorted(covariates) or len(set(names)) != len(names):
            diff = sorted(set(names) ^ set(covariates))
            raise InputError(f"co-data covariates do not match the training columns: {', '.join(diff)}")
        order = [names.index(c) for c in covariates]
        table = Table(table.names, [table.rows[i] for i in order])
    if len(table.rows) != len(covariates):
        raise InputError(f"co-data has {len(table.rows)} rows, expected one per covariate ({len(covariates)})")
    data_cols = [n for n in table.names if n != "covariate"]
    kinds = dict(kinds) if kinds else {n: CONTINUOUS for n in data_cols}
    for name in kinds:
        if name not in data_cols:
            raise InputError(f"missing column {name!r} in co-data")
    parts = []
    for name in data_cols:
        if name not in kinds:
            continue
        if kinds[name] == DUMMY_SOURCE:
            labels = table.column(name)
            levels = sorted(set(labels))
            group_of = np.array([levels.index(v) for v in labels])
            part = build_grouping_codata(len(covariates), group_of, prefix=f"{name}=")
            parts.append(CoDataMatrix(part.values, tuple(f"{name}={lv}" for lv in levels), part.kinds, part.groups))
        else:
            parts.append(CoDataMatrix(table.numeric([name]), (name,), (CONTINUOUS,)))
    if not parts:
        raise InputError("no co-data columns selected")
    return combine_codata(parts)


def _array_doc(a) -> list:
    return a.tolist()


def save_model(path, draws: DrawSet, covariates, response: str, extra: Optional[dict] = None) -> None:
    doc = model_document(draws, covariates, response, extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False, separators=(",", ":"))
        fh.write("\n")


def model_document(draws: DrawSet, covariates, response: str, extra: Optional[dict] = None) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "covariates": list(covariates),
        "response": response,
        "response_kind": draws.response_kind,
        "K": draws.K,
        "response_scaling": None if draws.scaling is None else {"min": draws.scaling[0], "max": draws.scaling[1]},
        "hyper": draws.hyper.to_dict(),
        "sigma_mu": draws.sigma_mu,
        "extra": extra or {},
        "draws": {
            "chain": _array_doc(draws.chain),
            "sweep": _array_doc(draws.sweep),
            "tree_ptr": _array_doc(draws.tree_ptr),
            "node_var": _array_doc(draws.node_var),
            "node_value": _array_doc(draws.node_value),
            "node_right": _array_doc(draws.node_right),
            "node_depth": _array_doc(draws.node_depth),
            "sigma2": _array_doc(draws.sigma2),
            "fit_mean": _array_doc(draws.fit_mean),
        },
    }


def load_model(path):
    """Returns (DrawSet without log likelihoods, model document)."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"model {path}: {exc}") from None
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise InputError(f"{path} is not a version-{MODEL_VERSION} {MODEL_FORMAT} file")
    d = doc["draws"]
    scaling = doc["response_scaling"]
    n = len(d["sigma2"])
    draws = DrawSet(
        K=doc["K"], n_features=len(doc["covariates"]), response_kind=doc["response_kind"],
        scaling=None if scaling is None else (scaling["min"], scaling["max"]),
        hyper=Hyperparams.from_dict(doc["hyper"]), sigma_mu=doc["sigma_mu"],
        chain=np.asarray(d["chain"], np.int64), sweep=np.asarray(d["sweep"], np.int64),
        tree_ptr=np.asarray(d["tree_ptr"], np.int64), node_var=np.asarray(d["node_var"], np.int32),
        node_value=np.asarray(d["node_value"], np.float64), node_right=np.asarray(d["node_right"], np.int32),
        node_depth=np.asarray(d["node_depth"], np.int32), sigma2=np.asarray(d["sigma2"], np.float64),
        fit_mean=np.asarray(d["fit_mean"], np.float64), loglik=np.zeros((n, 0)),
    )
    return draws, doc


def thin_for_saving(draws: DrawSet, max_draws: int) -> DrawSet:
    if draws.n_draws <= max_draws:
        return draws
    idx = np.unique(np.linspace(0, draws.n_draws - 1, max_draws).round().astype(np.int64))
    return draws.select(idx)
