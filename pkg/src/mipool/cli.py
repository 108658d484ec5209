"""Command-line interface: fit, simulate, and evaluate subcommands.

Every command writes a ``manifest.json`` next to its outputs recording the
resolved configuration, seed, input digests, and wall-clock timings, so any
run can be replayed exactly.  Exit codes: 0 success, 1 numerical or
convergence failure, 2 input validation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_csv
from .penalty import GROUPED_METHODS, STACKED_METHODS, parse_method
from .simulate import (
    ReplicationMetrics,
    SimulationCaseConfig,
    case_config,
    run_study,
    score_replication,
)
from .tuning import fit_adaptive_pipeline

MANIFEST_SCHEMA = 1


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, timings: dict):
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "software_version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(k): _sha256(v) for k, v in inputs.items()},
        "timings_s": timings,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_fit(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = parse_method(args.method)
    mi_set = load_csv(args.input, args.mask)
    t0 = time.perf_counter()
    if args.cv:
        result = fit_adaptive_pipeline(
            mi_set, spec, seed=args.seed, K=args.folds, grid_size=args.grid_size
        )
        final = result.final
        fit = final.fit
        cv_rows = []
        for stage_no, stage in enumerate((result.stage1, result.stage2), start=1):
            if stage is None:
                continue
            cv = stage.cv
            for ia, alpha in enumerate(cv.alphas):
                for il in range(cv.lambdas.shape[1]):
                    cv_rows.append(
                        [
                            stage_no,
                            stage.method,
                            _fmt(alpha),
                            _fmt(cv.lambdas[ia, il]),
                            _fmt(cv.mean_error[ia, il]),
                            _fmt(cv.se_error[ia, il]),
                            int((ia, il) == cv.selected),
                        ]
                    )
        _write_csv(
            out_dir / "cv_path.csv",
            ["stage", "method", "alpha", "lambda", "cv_error", "cv_se", "selected"],
            cv_rows,
        )
    else:
        if spec.adaptive:
            raise DataError("adaptive methods require --cv (stage-1 weights must be tuned)")
        if args.lam is None:
            raise DataError("provide --lambda or use --cv")
        from .data import observation_weights, standardize

        if spec.grouped:
            from .grouped import fit_grouped

            view = standardize(mi_set, "per-dataset")
            fit = fit_grouped(view.data, mi_set.y, args.lam, mi_set.family())
        else:
            from .stacked import fit_stacked, stack_rows

            view = standardize(mi_set, "stacked")
            o = observation_weights(mi_set, spec.weight_scheme)
            Xf, yf, of = stack_rows(view.data, mi_set.y, o.o)
            fit = fit_stacked(
                Xf, yf, of, mi_set.n, mi_set.family(), args.lam, alpha=args.alpha
            )
        from .tuning import _grouped_stage, _stacked_stage

        final = (
            _grouped_stage(spec.name, None, fit, view)
            if spec.grouped
            else _stacked_stage(spec.name, None, fit, view)
        )
    elapsed = time.perf_counter() - t0

    beta_std = final.beta_pooled_std
    header = ["covariate", "estimate_standardized", "estimate_original", "selected"]
    if spec.grouped:
        header += [f"estimate_original_imp{d + 1}" for d in range(mi_set.D)]
    rows = []
    for j, name in enumerate(mi_set.covariate_names):
        row = [
            name,
            _fmt(beta_std[j]),
            _fmt(final.beta_original[j]),
            int(beta_std[j] != 0.0),
        ]
        if spec.grouped:
            row += [_fmt(final.beta_original_per_dataset[d, j]) for d in range(mi_set.D)]
        rows.append(row)
    _write_csv(out_dir / "coefficients.csv", header, rows)

    inputs = {"input": args.input}
    if args.mask:
        inputs["mask"] = args.mask
    _write_manifest(
        out_dir,
        "fit",
        {
            "method": args.method,
            "cv": bool(args.cv),
            "lambda": args.lam,
            "alpha": args.alpha,
            "folds": args.folds,
            "grid_size": args.grid_size,
            "seed": args.seed,
        },
        inputs,
        {"fit": elapsed},
    )
    if not getattr(fit, "converged", True):
        print("warning: solver did not converge", file=sys.stderr)
        return 1
    return 0


def _load_case(case: str) -> SimulationCaseConfig:
    if case in ("1", "2", "3", "4"):
        return case_config(int(case))
    path = Path(case)
    if not path.exists():
        raise DataError(f"invalid case id or missing config file: {case}")
    raw = json.loads(path.read_text())
    return SimulationCaseConfig(
        n=int(raw["n"]),
        p=int(raw["p"]),
        blocks=tuple((tuple(idx), float(rho)) for idx, rho in raw.get("blocks", [])),
        beta_true=np.asarray(raw["beta_true"], dtype=float),
        beta0=float(raw.get("beta0", 0.0)),
        miss_groups=tuple((tuple(idx), float(r)) for idx, r in raw.get("miss_groups", [])),
    )


def cmd_simulate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _load_case(args.case)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        parse_method(m)
    t0 = time.perf_counter()
    study = run_study(
        config,
        methods,
        R=args.reps,
        D=args.imputations,
        seed=args.seed,
        grid_size=args.grid_size,
        K=args.folds,
    )
    elapsed = time.perf_counter() - t0

    rep_rows = [
        [
            args.case,
            m.method,
            r,
            _fmt(m.sens),
            _fmt(m.spec),
            _fmt(m.mse_nonnull),
            _fmt(m.mse_null),
            _fmt(m.runtime_s),
        ]
        for r, m in study.rows
    ]
    _write_csv(
        out_dir / "replications.csv",
        ["case", "method", "replication", "sens", "spec", "mse_nonnull", "mse_null", "runtime_s"],
        rep_rows,
    )
    _write_csv(
        out_dir / "summary.csv",
        ["case", "method", "n_reps", "sens", "spec", "mse_nonnull", "mse_null", "runtime_s"],
        [
            [
                args.case,
                s["method"],
                s["n_reps"],
                _fmt(s["sens"]),
                _fmt(s["spec"]),
                _fmt(s["mse_nonnull"]),
                _fmt(s["mse_null"]),
                _fmt(s["runtime_s"]),
            ]
            for s in study.summary()
        ],
    )
    inputs = {} if args.case in ("1", "2", "3", "4") else {"case_config": args.case}
    _write_manifest(
        out_dir,
        "simulate",
        {
            "case": args.case,
            "methods": methods,
            "reps": args.reps,
            "imputations": args.imputations,
            "seed": args.seed,
            "folds": args.folds,
            "grid_size": args.grid_size,
            "failures": study.failures,
        },
        inputs,
        {"study": elapsed},
    )
    return 0


def _read_named_column(path, value_col: str) -> dict[str, float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "covariate" not in reader.fieldnames:
            raise DataError(f"{path}: expected a 'covariate' column")
        if value_col not in reader.fieldnames:
            raise DataError(f"{path}: expected a {value_col!r} column")
        return {row["covariate"]: float(row[value_col]) for row in reader}


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    estimates = _read_named_column(args.estimates, "estimate")
    truth = _read_named_column(args.truth, "beta")
    if set(estimates) != set(truth):
        raise DataError("covariate names differ between estimates and truth files")
    names = list(truth)
    beta_true = np.array([truth[k] for k in names])
    beta_hat = np.array([estimates[k] for k in names])
    metrics = score_replication(beta_hat, beta_hat != 0.0, beta_true, method="external")
    _write_csv(
        out_dir / "metrics.csv",
        ["estimates_file", "sens", "spec", "mse_nonnull", "mse_null"],
        [
            [
                args.estimates,
                _fmt(metrics.sens),
                _fmt(metrics.spec),
                _fmt(metrics.mse_nonnull),
                _fmt(metrics.mse_null),
            ]
        ],
    )
    _write_manifest(
        out_dir,
        "evaluate",
        {"estimates": args.estimates, "truth": args.truth},
        {"estimates": args.estimates, "truth": args.truth},
        {},
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mipool", description="Pooled variable selection across multiply-imputed datasets"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    methods = ", ".join(STACKED_METHODS) + " (each with optional ':w'), " + ", ".join(GROUPED_METHODS)
    fit = sub.add_parser("fit", help="fit one method on a long-format imputation CSV")
    fit.add_argument("--input", required=True, help="long-format CSV (imputation_id, subject_id, y, x...)")
    fit.add_argument("--mask", default=None, help="optional 0/1 missingness CSV")
    fit.add_argument("--method", required=True, help=f"one of: {methods}")
    fit.add_argument("--lambda", dest="lam", type=float, default=None)
    fit.add_argument("--alpha", type=float, default=1.0)
    fit.add_argument("--cv", action="store_true", help="tune (alpha, lambda) by cross-validation")
    fit.add_argument("--folds", type=int, default=5)
    fit.add_argument("--grid-size", type=int, default=100)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out-dir", default=".")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run the simulation study")
    sim.add_argument("--case", required=True, help="1-4 or a JSON case config path")
    sim.add_argument("--methods", required=True, help="comma-separated method names")
    sim.add_argument("--reps", type=int, default=50)
    sim.add_argument("--imputations", type=int, default=5)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--folds", type=int, default=5)
    sim.add_argument("--grid-size", type=int, default=100)
    sim.add_argument("--out-dir", default=".")
    sim.set_defaults(func=cmd_simulate)

    ev = sub.add_parser("evaluate", help="score externally produced estimates")
    ev.add_argument("--estimates", required=True, help="CSV with covariate,estimate columns")
    ev.add_argument("--truth", required=True, help="CSV with covariate,beta columns")
    ev.add_argument("--out-dir", default=".")
    ev.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
