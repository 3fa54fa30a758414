"""Command-line front end: ``qnorm predict|simulate|compare|fold-check``.

Exit codes: 0 success, 1 comparison failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

from . import theory
from .experiment import (
    ComparisonReport,
    ExperimentConfig,
    ExperimentResult,
    Resample,
    fold_check,
    run_comparison,
    run_experiment,
)
from .layers import QuantMode
from .theory import InitScheme, NetworkSpec, PredictionReport

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

SPEC_KEYS = {
    "widths": list,
    "quant_mode": str,
    "batchnorm": bool,
    "batch_size": int,
    "init": str,
    "sign_activations": bool,
    "var_x": float,
    "var_gL": float,
    "delta_factor": float,
}
RUN_KEYS = {
    "replications": int,
    "seed": int,
    "resample": str,
    "epsilon_bn": float,
    "tolerance": float,
    "comment": str,
}
REQUIRED = ("widths", "quant_mode", "batchnorm")
CHOICES = {
    "quant_mode": [m.value for m in QuantMode],
    "init": [m.value for m in InitScheme],
    "resample": [m.value for m in Resample],
}


class ConfigError(Exception):
    pass


def _check_type(key, value, kind):
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"field '{key}': expected {kind.__name__}, got {type(value).__name__} ({value!r})")
    if key == "widths" and not all(isinstance(k, int) and not isinstance(k, bool) for k in value):
        raise ConfigError(f"field 'widths': expected an array of integers, got {value!r}")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"field '{key}': {value!r} is not one of {CHOICES[key]}")


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a decoded run-config document and build an ExperimentConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {**SPEC_KEYS, **RUN_KEYS}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
    for key in REQUIRED:
        if key not in doc:
            raise ConfigError(f"missing required field '{key}'")
    for key, value in doc.items():
        _check_type(key, value, known[key])

    spec_kw = {k: doc[k] for k in SPEC_KEYS if k in doc}
    run_kw = {k: doc[k] for k in ("replications", "resample", "epsilon_bn", "tolerance") if k in doc}
    if "seed" in doc:
        run_kw["master_seed"] = doc["seed"]
    try:
        return ExperimentConfig(NetworkSpec(**spec_kw), **run_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return parse_config(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# -- formatting ------------------------------------------------------------

def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return repr(x) if not math.isfinite(x) else format(x, ".17g")
    return str(x)


def _csv_text(header: list[str], rows: list[list], meta: dict) -> str:
    buf = io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def _json_text(header: list[str], rows: list[list], meta: dict, extra: dict | None = None) -> str:
    def clean(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v
    doc = dict(meta)
    if extra:
        doc.update(extra)
    doc["layers"] = [{h: clean(v) for h, v in zip(header, row)} for row in rows]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _table_text(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[f"{v:.6g}" if isinstance(v, float) else fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _emit(args, header, rows, meta, config: ExperimentConfig, summary: str = ""):
    """Human table to stdout; machine format to --out (or stdout if no --out)."""
    if args.format == "table" and not args.out:
        sys.stdout.write(_table_text(header, rows))
        if summary:
            sys.stdout.write(summary)
        return
    fmt_name = "csv" if args.format == "table" else args.format
    if fmt_name == "csv":
        text = _csv_text(header, rows, meta)
    else:
        text = _json_text(header, rows, meta, {"config": config.to_dict()})
    if args.out:
        Path(args.out).write_text(text)
        sys.stdout.write(_table_text(header, rows))
        if summary:
            sys.stdout.write(summary)
    else:
        sys.stdout.write(text)


def _meta(config: ExperimentConfig) -> dict:
    return {"config_hash": config.config_hash(), "master_seed": config.master_seed}


def prediction_rows(report: PredictionReport):
    header = ["layer", "predicted_var", "predicted_ratio", "formula_id",
              "delta", "var_wt", "zero_fraction", "feasible"]
    quant = {q["layer"]: q for q in report.quantizer}
    rows = []
    for e in report.entries:
        q = quant.get(e.layer, {})
        rows.append([e.layer, e.predicted_var, e.predicted_ratio, e.formula_id,
                     q.get("delta"), q.get("var_wt"), q.get("zero_fraction"), q.get("feasible")])
    return header, rows


def simulation_rows(result: ExperimentResult):
    header = ["layer", "empirical_var", "stderr", "sigma_hat", "var_shat_sq", "truncated_count"]
    rows = [[s.layer, s.empirical_var, s.stderr, s.sigma_hat, s.var_shat_sq, s.truncated_count]
            for s in result.stats.layers]
    return header, rows


def comparison_rows(report: ComparisonReport):
    header = ["layer", "measured_ratio", "predicted_ratio", "rel_dev", "pass"]
    rows = [[e.layer, e.measured_ratio, e.predicted_ratio, e.rel_dev, e.passed] for e in report.entries]
    return header, rows


# -- commands --------------------------------------------------------------

def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    from dataclasses import replace
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["master_seed"] = args.seed
    if getattr(args, "reps", None) is not None:
        kw["replications"] = args.reps
    if getattr(args, "tolerance", None) is not None:
        kw["tolerance"] = args.tolerance
    try:
        return replace(config, **kw) if kw else config
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_predict(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    report = theory.predict(config.spec)
    header, rows = prediction_rows(report)
    summary = "".join(f"{k}: {v}\n" for k, v in report.notes.items())
    for q in report.quantizer:
        if not q["feasible"]:
            summary += f"warning: layer {q['layer']} zero fraction {q['zero_fraction']:.3f} >= 0.5\n"
    _emit(args, header, rows, _meta(config), config, summary)
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    result = run_experiment(config)
    header, rows = simulation_rows(result)
    truncated = sum(s.truncated_count for s in result.stats.layers)
    summary = (f"replications={result.stats.replications} truncated_replications={result.stats.excluded} "
               f"truncated_layer_values={truncated}\n")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    _emit(args, header, rows, _meta(config), config, summary)
    return EXIT_OK


def cmd_compare(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    report, result = run_comparison(config)
    header, rows = comparison_rows(report)
    verdict = "PASS" if report.all_passed else "FAIL"
    summary = f"{verdict}: {sum(e.passed for e in report.entries)}/{len(report.entries)} layers within {report.tolerance}\n"
    _emit(args, header, rows, _meta(config), config, summary)
    if args.plot_data:
        pred = theory.predict(config.spec)
        plot_rows = [[s.layer, s.empirical_var, p.predicted_var]
                     for s, p in zip(result.stats.layers, pred.entries)]
        Path(args.plot_data).write_text(_csv_text(["layer", "measured", "predicted"], plot_rows, _meta(config)))
    return EXIT_OK if report.all_passed else EXIT_FAIL


def cmd_fold_check(args) -> int:
    for name in ("B", "K", "trials"):
        if getattr(args, name) < (2 if name == "B" else 1 if name == "K" else 0):
            raise ConfigError(f"--{name} out of range: {getattr(args, name)}")
    if args.trials == 0:
        print("warning: trials=0, fold check is vacuous", file=sys.stderr)
    mismatches, total = fold_check(args.seed, args.B, args.K, args.trials, args.negative_gamma)
    print(f"fold-check: trials={args.trials} elements={total} mismatches={mismatches}")
    return EXIT_OK if mismatches == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qnorm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, reps=True):
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--format", choices=["table", "csv", "json"], default="table")
        p.add_argument("--out", help="write the machine-readable output here")
        p.add_argument("--seed", type=int, help="override master seed")
        if reps:
            p.add_argument("--reps", type=int, help="override replication count")

    p = sub.add_parser("predict", help="closed-form per-layer predictions")
    with_config(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="Monte Carlo gradient variance measurement")
    with_config(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="measured vs predicted layer ratios")
    with_config(p)
    p.add_argument("--tolerance", type=float, help="relative tolerance per layer")
    p.add_argument("--plot-data", help="write layer,measured,predicted variance series")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fold-check", help="check the BatchNorm-to-bias folding under sign")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--B", type=int, default=32)
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--negative-gamma", action="store_true",
                   help="debug: negate one gamma entry to show the gamma > 0 precondition")
    p.set_defaults(func=cmd_fold_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
