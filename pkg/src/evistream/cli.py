"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
The output directory is taken from ``--out``, else ``$EVISTREAM_OUT_DIR``,
else the config's ``output_dir``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .accumulator import EvidenceModel, run_stream, trace_csv, with_threshold
from .baselines import METHODS
from .config import ExperimentConfig
from .data import DataError, generate_synthetic, load_dataset, write_dataset
from .encoder import InputError
from .harness import (EvidenceMethod, SplitError, SweepGrid, UndefinedMetricError, cv_report,
                      evaluate_metrics, inner_split, nested_cv, pooled_sweep, threshold_sweep, train)
from .numerics import ConfigError

log = logging.getLogger("evistream")

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4
OUT_ENV = "EVISTREAM_OUT_DIR"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------
# config resolution
# ----------------------------------------------------------------------


def resolve_config(args):
    exp = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        exp.seed = args.seed
    if getattr(args, "dataset", None):
        exp.dataset, exp.synthetic = args.dataset, None
    if getattr(args, "threshold", None) is not None:
        exp.accumulator = with_threshold(exp.accumulator, args.threshold)
    if getattr(args, "thresholds", None):
        exp.sweep = SweepGrid.parse(args.thresholds)
    if getattr(args, "order", None):
        exp.order = args.order
    if getattr(args, "epochs", None):
        exp.train = replace(exp.train, max_epochs=args.epochs,
                            patience=min(exp.train.patience, args.epochs))
    if os.environ.get(OUT_ENV):
        exp.output_dir = os.environ[OUT_ENV]
    if getattr(args, "out", None):
        exp.output_dir = args.out
    exp.validate()
    return exp


def load_samples(exp):
    if exp.dataset is not None:
        return load_dataset(exp.dataset)
    return generate_synthetic(exp.synthetic)


def holdout_split(samples, exp):
    """(fit, val, holdout) sample lists, deterministic in the seed."""
    labels = [s.label for s in samples]
    dev, hold = inner_split(np.arange(len(samples)), labels, exp.holdout_fraction, exp.seed)
    fit, val = inner_split(dev, labels, exp.inner_val_fraction, exp.seed + 1)
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return pick(fit), pick(val), pick(hold)


def _prepare_out(exp):
    out = Path(exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(exp.to_json())
    print(exp.to_json(), end="")
    print(f"seed: {exp.seed}")
    return out


def _load_model(exp, checkpoint):
    model = EvidenceModel(exp.encoder, seed=exp.seed)
    model.store.load_state(nx.load_checkpoint(checkpoint))
    return model


def _fit(exp, samples):
    fit, val, hold = holdout_split(samples, exp)
    model = EvidenceModel(exp.encoder, seed=exp.seed)
    res = train(model, fit, val, replace(exp.train, seed=exp.seed),
                EvidenceMethod(exp.accumulator, exp.order))
    return model, res, hold


def _model_for(exp, samples, checkpoint):
    if checkpoint:
        return _load_model(exp, checkpoint), holdout_split(samples, exp)[2]
    model, _, hold = _fit(exp, samples)
    return model, hold


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_generate(args):
    exp = resolve_config(args)
    spec = exp.synthetic if exp.synthetic is not None else None
    if spec is None:
        raise ConfigError("generate needs a synthetic spec, not a dataset path")
    if args.subjects is not None:
        spec = replace(spec, subjects=args.subjects)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    spec.validate()
    samples = generate_synthetic(spec)
    write_dataset(samples, args.out)
    print(json.dumps(spec.to_dict(), sort_keys=True))
    print(f"seed: {spec.seed}")
    return 0


def cmd_train(args):
    exp = resolve_config(args)
    samples = load_samples(exp)
    out = _prepare_out(exp)
    model, res, _ = _fit(exp, samples)
    nx.save_checkpoint(model.store, out / "model")
    write_csv(out / "history.csv", res.history, ["epoch", "train_loss", "val_loss", "slices"])
    return 0


def cmd_eval(args):
    exp = resolve_config(args)
    samples = load_samples(exp)
    out = _prepare_out(exp)
    model, hold = _model_for(exp, samples, args.checkpoint)
    method = EvidenceMethod(exp.accumulator, exp.order)
    pred, prob, steps = method.predict(model, hold)
    metrics = evaluate_metrics(pred[:, 0], [s.label for s in hold], prob[:, 0],
                               steps[:, 0], [s.n for s in hold])
    write_json(out / "report.json", {"method": "nyctale", "threshold": exp.accumulator.threshold,
                                     "split": "holdout", "metrics": metrics.to_dict()})
    return 0


def cmd_sweep(args):
    exp = resolve_config(args)
    samples = load_samples(exp)
    out = _prepare_out(exp)
    model, hold = _model_for(exp, samples, args.checkpoint)
    rows = threshold_sweep(model, hold, exp.sweep.values(), exp.order, exp.accumulator.weighting)
    write_csv(out / "sweep.csv", rows, ["threshold", "accuracy", "mean_slices", "slice_fraction"])
    return 0


def cmd_nested_cv(args):
    exp = resolve_config(args)
    samples = load_samples(exp)
    out = _prepare_out(exp)
    folds = nested_cv(samples, exp, "nyctale", workers=args.workers)
    write_json(out / "report.json", cv_report(folds, "nyctale", exp))
    write_csv(out / "sweep.csv", pooled_sweep(folds), ["threshold", "accuracy", "mean_slices"])
    hist = [{"fold": f.fold, **h} for f in folds for h in f.history]
    write_csv(out / "history.csv", hist, ["fold", "epoch", "train_loss", "val_loss", "slices"])
    return 0


COMPARE_COLUMNS = ["method", "accuracy", "sensitivity", "specificity", "auc", "mean_slices",
                   "accuracy_std", "sensitivity_std", "specificity_std", "auc_std", "mean_slices_std"]


def compare_rows(samples, exp, methods=("nyctale",) + METHODS, workers=1):
    rows, reports = [], {}
    for m in methods:
        folds = nested_cv(samples, exp, m, workers=workers)
        rep = cv_report(folds, m)
        reports[m] = rep
        agg = rep["aggregate"]
        row = {"method": m}
        for key in ("accuracy", "sensitivity", "specificity", "auc", "mean_slices"):
            row[key] = agg[key]["mean"]
            row[f"{key}_std"] = agg[key]["std"]
        rows.append(row)
    return rows, reports


def cmd_compare(args):
    exp = resolve_config(args)
    samples = load_samples(exp)
    out = _prepare_out(exp)
    rows, reports = compare_rows(samples, exp, workers=args.workers)
    write_csv(out / "compare.csv", rows, COMPARE_COLUMNS)
    write_json(out / "compare.json", reports)
    return 0


def cmd_trace(args):
    exp = resolve_config(args)
    samples = load_samples(exp)
    wanted = set(args.subject or [])
    if wanted - {s.subject_id for s in samples}:
        raise DataError(f"unknown subject ids: {sorted(wanted - {s.subject_id for s in samples})}")
    out = _prepare_out(exp)
    model, hold = _model_for(exp, samples, args.checkpoint)
    chosen = [s for s in samples if s.subject_id in wanted] if wanted else hold
    for s in chosen:
        res = run_stream(s.slices, model, exp.accumulator, exp.order)
        (out / f"trace_{s.subject_id}.csv").write_text(trace_csv(res))
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="evistream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="experiment JSON config")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dataset", help="dataset directory (overrides the synthetic spec)")
        sp.add_argument("--order", choices=["left_to_right", "center_out"])
        sp.add_argument("--threshold", type=float)
        sp.add_argument("--epochs", type=int, help="override max_epochs")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--subjects", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    for name, func, helptext in (
        ("train", cmd_train, "train on the fit split; writes model.{bin,json} and history.csv"),
        ("eval", cmd_eval, "evaluate on the holdout split; writes report.json"),
        ("sweep", cmd_sweep, "threshold sweep on the holdout split; writes sweep.csv"),
        ("nested-cv", cmd_nested_cv, "nested cross-validation; writes report.json and sweep.csv"),
        ("compare", cmd_compare, "accumulation vs voting/gmp/gap; writes compare.csv"),
        ("trace", cmd_trace, "per-subject decision traces; writes trace_<subject>.csv"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        if name in ("eval", "sweep", "trace"):
            sp.add_argument("--checkpoint", help="checkpoint prefix (model.bin/model.json); trains if absent")
        if name in ("sweep", "nested-cv"):
            sp.add_argument("--thresholds", help="start:stop:step")
        if name in ("nested-cv", "compare"):
            sp.add_argument("--workers", type=int, default=1)
        if name == "trace":
            sp.add_argument("--subject", action="append", help="subject id (repeatable)")
        sp.set_defaults(func=func)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SplitError, InputError, FileNotFoundError, UndefinedMetricError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
