"""Command-line interface.

Subcommands: ``kappa``, ``figure-data``, ``certify`` and ``oracle``. Every
command writes a JSON report envelope (or CSV with ``--format csv``).
Exit codes: 0 success, 1 a bound was violated (``oracle``), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import (MaxInfoBound, TrainingRecipe, maxinfo_dpsgd_explicit, maxinfo_dpsgd_optimized,
                     maxinfo_gaussian_mechanism, maxinfo_pure_dp, tau_closed_form)
from .certify import run_pipeline
from .config import (ConfigError, bundled, load_dataset, oracle_cases, pipeline_config, read_json,
                     worker_count)
from .oracle import validate_bound

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2
SWEEP_KEYS = ("E", "T", "m", "zeta", "sigma", "beta")

log = logging.getLogger("dpcert")


class UsageError(ValueError):
    pass


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def envelope(command: str, config, seed, outputs, timings: dict | None = None) -> dict:
    doc = {"tool": "dpcert", "version": __version__, "command": command,
           "config": config, "seed": seed, "outputs": outputs}
    if timings is not None:
        doc["timings"] = timings
    return _jsonable(doc)


def to_csv(rows: list[dict]) -> str:
    """RFC-4180 CSV (CRLF line endings, minimal quoting) with the union of keys as header."""
    buf = io.StringIO()
    fields = list(dict.fromkeys(k for r in rows for k in r))
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _csv_cell(v) for k, v in r.items()})
    return buf.getvalue()


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)


def _dump(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# kappa


def _parse_sweep(spec: str) -> tuple[str, np.ndarray]:
    try:
        key, rng = spec.split("=", 1)
        start, stop, count = rng.split(":")
        values = np.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise UsageError(f"--sweep must look like key=start:stop:count, got {spec!r}") from None
    if key not in SWEEP_KEYS:
        raise UsageError(f"--sweep key must be one of {', '.join(SWEEP_KEYS)}, got {key!r}")
    if int(count) < 1:
        raise UsageError("--sweep count must be >= 1")
    return key, values


def kappa_row(E: int, T: int, m: int, zeta: float, sigma: float, beta: float,
              n: int | None = None, sensitivity: float | None = None,
              epsilon: float | None = None) -> dict:
    """All max-information bounds for one recipe, flattened into a table row."""
    if not (0.0 < beta < 1.0):
        raise UsageError(f"beta must lie in (0, 1), got {beta}")
    if not (sigma > 0):
        raise UsageError(f"sigma must be positive, got {sigma}")
    recipe = TrainingRecipe(E, T, m, zeta, sigma, n)
    opt = maxinfo_dpsgd_optimized(recipe, beta)
    row = {"E": E, "T": T, "m": m, "zeta": zeta, "sigma": sigma, "beta": beta, "nu": recipe.nu,
           "kappa_optimized": opt.value, "lambda_star": opt.minimizer,
           "kappa_explicit": maxinfo_dpsgd_explicit(recipe, beta).value,
           "tau_closed_form": tau_closed_form(T, recipe.nu, beta)}
    s = zeta if sensitivity is None else sensitivity
    gauss = (MaxInfoBound(0.0, beta, "gaussian-single") if s == 0
             else maxinfo_gaussian_mechanism(m, s, sigma, beta))
    row["kappa_gaussian_single"] = gauss.value
    row["gaussian_alpha_star"] = gauss.minimizer
    if epsilon is not None:
        if n is None:
            raise UsageError("--epsilon needs --n")
        row["epsilon"] = epsilon
        row["kappa_pure_dp"] = maxinfo_pure_dp(n, epsilon, beta).value
    if n is not None:
        row["n"] = n
    return row


def cmd_kappa(args) -> tuple[dict, list[dict], int]:
    base = {"E": args.E, "T": args.T, "m": args.m, "zeta": args.zeta, "sigma": args.sigma,
            "beta": args.beta}
    extra = {"n": args.n, "sensitivity": args.sensitivity, "epsilon": args.epsilon}
    if args.sweep:
        key, values = _parse_sweep(args.sweep)
        rows = []
        for v in values:
            params = dict(base)
            params[key] = int(round(v)) if key in ("E", "T", "m") else float(v)
            rows.append(kappa_row(**params, **extra))
    else:
        rows = [kappa_row(**base, **extra)]
    config = {**base, **extra, "sweep": args.sweep}
    return envelope("kappa", config, None, {"rows": rows}), rows, EXIT_OK


# ---------------------------------------------------------------------------
# figure-data


def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def figure_rows(E: int, T: int, m: int, sigma: float, n_grid, ratio_grid, delta_grid) -> list[dict]:
    """``kappa/n`` and ``log(4 sqrt(n)/delta)/n`` over the grids (kappa at ``beta = delta/2``)."""
    rows = []
    for ratio, delta in itertools.product(ratio_grid, delta_grid):
        if not (0.0 < delta < 1.0):
            raise UsageError(f"delta must lie in (0, 1), got {delta}")
        recipe = TrainingRecipe(E, T, m, ratio * sigma, sigma)
        beta = delta / 2.0
        k_opt = maxinfo_dpsgd_optimized(recipe, beta).value
        k_exp = maxinfo_dpsgd_explicit(recipe, beta).value
        for n in n_grid:
            n = int(n)
            if n < T * m:
                raise UsageError(f"n={n} is smaller than T*m={T * m}")
            rows.append({"n": n, "zeta_over_sigma": ratio, "delta": delta, "beta": beta,
                         "E": E, "T": T, "m": m, "nu": recipe.nu,
                         "kappa_optimized": k_opt, "kappa_explicit": k_exp,
                         "kappa_optimized_over_n": k_opt / n, "kappa_explicit_over_n": k_exp / n,
                         "log_term_over_n": math.log(4.0 * math.sqrt(n) / delta) / n})
    return rows


def cmd_figure_data(args) -> tuple[dict, list[dict], int]:
    rows = figure_rows(args.E, args.T, args.m, args.sigma, args.n_grid, args.ratio_grid, args.delta_grid)
    config = {"E": args.E, "T": args.T, "m": args.m, "sigma": args.sigma, "n_grid": args.n_grid,
              "ratio_grid": args.ratio_grid, "delta_grid": args.delta_grid}
    return envelope("figure-data", config, None, {"rows": rows}), rows, EXIT_OK


# ---------------------------------------------------------------------------
# certify


def cmd_certify(args) -> tuple[dict, list[dict], int]:
    if args.config is None:
        doc, base = bundled("certify_example.json"), None
    else:
        doc, base = read_json(args.config), Path(args.config).resolve().parent
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    resolved = {**doc, "seed": seed}
    # validate before touching the dataset so schema errors win
    from .config import CERTIFY_SCHEMA, validate

    validate(doc, CERTIFY_SCHEMA)
    dataset = load_dataset(doc["dataset"], base)
    config = pipeline_config(doc, dataset, seed, worker_count())
    t0 = time.perf_counter()
    result = run_pipeline(config, dataset)
    elapsed = time.perf_counter() - t0
    rows = result.summary_rows()
    outputs = {
        "summary": rows,
        "summary_columns": list(rows[0]) if rows else [],
        "best": {k: v.to_dict() for k, v in result.best.items()},
        "cells": [c.to_dict() for c in result.cells],
        "model": config.model.to_dict(),
        "dataset": {"n": len(dataset), "p": dataset.p, "provenance": dataset.provenance,
                    "meta": dataset.meta},
        "notes": {
            "posterior_objective": "surrogate risk + sqrt((KL + kappa + log(2 K1 K2 sqrt(n)/slack)) / (2n))",
            "final_certificate": "kl-inverse of the Monte-Carlo-inflated empirical risk",
            "kappa_failure_budget": "each DP-SGD kappa is computed at beta / K1",
            "data_independent_grid": "the data-independent sweep is its own union bound with K1 = 1",
        },
    }
    timings = {"pipeline_seconds": elapsed} if args.timings else None
    code = EXIT_OK if rows else EXIT_VIOLATION
    return envelope("certify", resolved, seed, outputs, timings), rows, code


# ---------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> tuple[dict, list[dict], int]:
    if args.config is not None:
        doc = read_json(args.config)
    else:
        doc = bundled(f"oracle_{args.suite}.json")
    if args.trials is not None:
        if args.trials < 1:
            raise UsageError(f"--trials must be >= 1, got {args.trials}")
        doc = {**doc, "suite": [{**c, "trials": args.trials} for c in doc.get("suite", [])]}
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    cases = oracle_cases(doc)
    workers = worker_count()
    reports, rows = [], []
    t0 = time.perf_counter()
    for i, case in enumerate(cases):
        inst = case["instance"]
        try:
            rep = validate_bound(inst, case["method"], case["beta"], case["trials"],
                                 seed=_case_seed(seed, i), repetitions=case["repetitions"],
                                 threshold_scale=case["threshold_scale"], workers=workers)
        except ValueError as exc:
            raise ConfigError(f"/suite/{i}", str(exc)) from None
        d = rep.to_dict()
        d["instance"] = inst.to_dict()
        d["threshold_scale"] = case["threshold_scale"]
        reports.append(d)
        rows.append({"name": rep.name, "method": rep.method, "beta": rep.beta, "kappa": rep.kappa,
                     "threshold": rep.threshold, "max_tail": d["max_tail"],
                     "max_radius": max(t.radius for t in rep.tails), "trials": case["trials"],
                     "repetitions": case["repetitions"], "passed": rep.passed})
    elapsed = time.perf_counter() - t0
    all_passed = all(r["passed"] for r in rows)
    outputs = {"cases": reports, "all_passed": all_passed}
    timings = {"oracle_seconds": elapsed} if args.timings else None
    return (envelope("oracle", {**doc, "seed": seed}, seed, outputs, timings), rows,
            EXIT_OK if all_passed else EXIT_VIOLATION)


def _case_seed(seed: int, index: int) -> int:
    from .rng import derive_seed

    return derive_seed(seed, "oracle-case", index)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--timings", action="store_true",
                        help="include wall-clock timings (reports are then no longer byte-reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dpcert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dpcert {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kappa", parents=[common], help="max-information bounds for a DP-SGD recipe")
    p.add_argument("--E", type=int, required=True, help="epochs")
    p.add_argument("--T", type=int, required=True, help="steps per epoch")
    p.add_argument("--m", type=int, required=True, help="batch size")
    p.add_argument("--zeta", type=float, required=True, help="clipping threshold")
    p.add_argument("--sigma", type=float, required=True, help="noise standard deviation")
    p.add_argument("--beta", type=float, required=True, help="failure probability")
    p.add_argument("--n", type=int, help="dataset size (checks n >= T*m; needed for --epsilon)")
    p.add_argument("--sensitivity", type=float, help="single-release sensitivity (default: zeta)")
    p.add_argument("--epsilon", type=float, help="also report the pure-DP comparator at this epsilon")
    p.add_argument("--sweep", help="vary one of E,T,m,zeta,sigma,beta: key=start:stop:count")
    p.set_defaults(handler=cmd_kappa)

    p = sub.add_parser("figure-data", parents=[common], help="kappa/n curves as plot-ready CSV")
    p.add_argument("--E", type=int, default=1)
    p.add_argument("--T", type=int, default=12)
    p.add_argument("--m", type=int, default=5000)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--n-grid", type=_float_list,
                   default=[60_000, 100_000, 200_000, 500_000, 1_000_000, 2_000_000])
    p.add_argument("--ratio-grid", type=_float_list, default=[0.0025, 0.005, 0.01, 0.02])
    p.add_argument("--delta-grid", type=_float_list, default=[0.01, 0.05])
    p.set_defaults(handler=cmd_figure_data)

    p = sub.add_parser("certify", parents=[common], help="run the certificate pipeline")
    p.set_defaults(handler=cmd_certify)

    p = sub.add_parser("oracle", parents=[common], help="exact-enumeration tail checks")
    p.add_argument("--suite", choices=("default", "adversarial"), default="default",
                   help="bundled suite used when --config is absent")
    p.add_argument("--trials", type=int, help="override the trial count of every case")
    p.set_defaults(handler=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        doc, rows, code = args.handler(args)
    except ConfigError as exc:
        print(f"dpcert: config error at {exc.pointer or '/'}: {exc.message}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValueError) as exc:
        print(f"dpcert: {exc}", file=sys.stderr)
        return EXIT_USAGE
    emit(to_csv(rows) if args.format == "csv" else _dump(doc), args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
