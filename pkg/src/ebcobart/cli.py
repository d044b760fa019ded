"""Command line interface: ``ebcobart {fit,predict,simulate,eval}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from . import io as eio
from .metrics import auc, brier
from .orchestrator import eb_cobart_fit, predict
from .sampler import BINARY, Dataset
from .simulate import BUDGETS, REGIMES, ExperimentSettings, pmse, rows_to_csv, run_experiment, summarize

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("ebcobart")

CONFIG_HELP = """\
config file (JSON object; unknown keys are rejected). Keys and defaults:
  response "y", response_kind "continuous" | "binary",
  preset "flexible" | "rigid", update_alpha_k false, update_nu_lambda false,
  max_iterations 20, stopping "waic" | "cv", cv_folds 5, K 50, nu 10,
  sigma_quantile 0.75, max_saved_draws 1000,
  codata_kinds {column: "dummy-source" | "continuous"} (default: all continuous),
  chain {n_chains 4, n_samples 2500, n_burnin 500, thin 1, seed 0}
"""


def _fail(code, msg):
    print(f"ebcobart: error: {msg}", file=sys.stderr)
    return code


def cmd_fit(args) -> int:
    run, io_cfg = eio.load_config(args.config)
    if args.seed is not None:
        run = replace(run, chain=replace(run.chain, seed=args.seed))
    table = eio.read_table(args.train)
    covariates = [n for n in table.names if n != io_cfg.response]
    y = table.numeric([io_cfg.response])[:, 0]
    if not covariates:
        raise eio.InputError("training data has no covariate columns")
    X = table.numeric(covariates)
    try:
        data = Dataset(X, y, io_cfg.response_kind)
    except ValueError as exc:
        raise eio.InputError(f"column {io_cfg.response!r}: {exc}") from None
    codata = eio.read_codata(args.codata, io_cfg.codata_kinds, covariates) if args.codata else None
    if codata is None and run.max_iterations > 1:
        raise eio.InputError("co-data required for EB loop (or set max_iterations to 1)")

    result = eb_cobart_fit(data, codata, run)
    saved = eio.thin_for_saving(result.best, io_cfg.max_saved_draws)
    fitted, _ = predict(saved, data.X)
    report = result.report(codata)
    report["fitted"] = [float(v) for v in fitted]
    report["config"] = {"response": io_cfg.response, "response_kind": io_cfg.response_kind,
                        "preset": run.preset, "K": run.K, "seed": run.chain.seed}
    eio.save_model(args.model, saved, covariates, io_cfg.response,
                   extra={"selected_iteration": result.selected})
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, allow_nan=False)
            fh.write("\n")
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            result.best.write_trace(fh)
    return EXIT_OK


def cmd_predict(args) -> int:
    draws, doc = eio.load_model(args.model)
    table = eio.read_table(args.data)
    covariates = doc["covariates"]
    present = [n for n in table.names if n != doc["response"]]
    if set(present) != set(covariates):
        diff = sorted(set(present) ^ set(covariates))
        raise eio.InputError(f"covariate mismatch: {', '.join(diff)}")
    X = table.numeric(covariates) if table.rows else np.zeros((0, len(covariates)))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prediction", "lower", "upper"])
        if len(X):
            point, per_draw = predict(draws, X)
            lo, hi = np.quantile(per_draw, [0.025, 0.975], axis=0)
            for row in zip(point, lo, hi):
                w.writerow([repr(float(v)) for v in row])
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.regime not in REGIMES:
        raise eio.InputError(f"invalid regime {args.regime!r}; choose from {', '.join(REGIMES)}")
    settings = ExperimentSettings(N=args.N, G=tuple(args.G), presets=tuple(args.preset), budget=args.budget,
                                  n_test=args.n_test, max_iterations=args.max_iterations,
                                  update_alpha_k=args.update_alpha_k)
    rows = run_experiment(args.regime, settings, args.replicates, args.seed)
    with open(args.out_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write(rows_to_csv(rows))
    summary = summarize(rows, args.regime, settings, args.replicates, args.seed)
    with open(args.out_json, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, allow_nan=False)
        fh.write("\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = eio.read_table(args.predictions)
    truth = eio.read_table(args.truth)
    column = args.column or (truth.names[0] if len(truth.names) == 1 else "y")
    y = truth.numeric([column])[:, 0]
    p = pred.numeric(["prediction"])[:, 0]
    if len(y) != len(p):
        raise eio.InputError(f"{len(p)} predictions for {len(y)} observations")
    y_binary = bool(np.all((y == 0) | (y == 1)))
    kind = args.kind if args.kind != "auto" else (BINARY if y_binary else "continuous")
    if kind == BINARY:
        if not y_binary or np.any((p < 0) | (p > 1)):
            raise eio.InputError("mixed response kinds: binary evaluation needs 0/1 truth and probability predictions")
        print(f"auc {auc(y, p)!r}")
        print(f"brier {brier(y, p)!r}")
    else:
        print(f"pmse {pmse(y, p)!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebcobart", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit EB-coBART (or plain BART with max_iterations=1)",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=CONFIG_HELP)
    f.add_argument("--config", required=True)
    f.add_argument("--train", required=True, help="training CSV with a header row")
    f.add_argument("--codata", help="co-data CSV, one row per covariate")
    f.add_argument("--model", required=True, help="output model JSON")
    f.add_argument("--report", help="output run report JSON")
    f.add_argument("--trace", help="output newline-delimited JSON draw trace")
    f.add_argument("--seed", type=int, help="override chain.seed")
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="posterior predictions for new rows")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="CSV whose columns match the model covariates by name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="run a simulation experiment")
    s.add_argument("--regime", required=True, help=f"one of {', '.join(REGIMES)}")
    s.add_argument("--N", type=int, default=100)
    s.add_argument("--G", type=int, nargs="+", default=[5])
    s.add_argument("--preset", nargs="+", default=["rigid", "flexible"], choices=["rigid", "flexible"])
    s.add_argument("--replicates", type=int, default=20)
    s.add_argument("--budget", default="desk", choices=sorted(BUDGETS))
    s.add_argument("--n-test", type=int, default=500)
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--update-alpha-k", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--out-json", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="PMSE, or AUC and Brier score, of a predictions file")
    e.add_argument("--predictions", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--column", help="truth column (default: the only column, else 'y')")
    e.add_argument("--kind", default="auto", choices=["auto", "continuous", "binary"])
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (eio.InputError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    except (RuntimeError, FloatingPointError, ArithmeticError, ValueError) as exc:
        return _fail(EXIT_NUMERIC, str(exc))


if __name__ == "__main__":
    sys.exit(main())
