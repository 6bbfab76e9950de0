"""Command-line interface: ``dpfair {synthesize,balance,evaluate,matrix,report,make-fixture}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import yaml

from .classifier import DEFAULT_LAMBDA, predict, train_logreg
from .fairness import MetricsRecord, evaluate_predictions
from .harness import (
    PREPROCESS_ARMS,
    SYNTHESIZERS,
    RunSpec,
    emit_reports,
    load_baselines,
    load_results,
    run_all,
    synthesize,
)
from .mechanisms import Budget, BudgetLedger, make_rng, noise_disabled
from .tabular import load_schema, load_table, minority_proportion, write_schema, write_table
from .undersample import multilabel_undersample

TEST_BUILD_ENV = "DPFAIR_TEST_BUILD"


def _eps_grid(text: str) -> list[float]:
    return [float(x) for x in text.replace(" ", "").split(",") if x]


def _noise_context(args):
    if getattr(args, "test_mode_no_noise", False):
        if os.environ.get(TEST_BUILD_ENV) != "1":
            raise SystemExit(f"--test-mode-no-noise is only available when {TEST_BUILD_ENV}=1")
        return noise_disabled()
    return nullcontext()


def _add_hidden_test_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--test-mode-no-noise", action="store_true", help=argparse.SUPPRESS)


def cmd_synthesize(args) -> int:
    data = load_table(args.dataset, args.schema)
    _, delim = load_schema(args.schema)
    spec = RunSpec(synthesizer=args.synth, delta=args.delta)
    delta = spec.synth_delta()
    ledger = BudgetLedger(Budget(args.epsilon, delta))
    with _noise_context(args):
        synth = synthesize(args.synth, data, args.epsilon, ledger, make_rng(args.seed), spec)
    write_table(synth, args.out, delimiter=delim)
    if args.ledger:
        with open(args.ledger, "w") as fh:
            json.dump(ledger.transcript(), fh, indent=2)
    print(f"wrote {len(synth)} synthetic rows to {args.out} "
          f"(eps={args.epsilon}, delta={delta}, minority proportion {minority_proportion(synth):.4f})")
    return 0


def cmd_balance(args) -> int:
    data = load_table(args.dataset, args.schema)
    _, delim = load_schema(args.schema)
    out = args.out or args.dataset
    balanced = multilabel_undersample(data, args.seed)
    write_table(balanced, out, delimiter=delim)
    print(f"balanced {len(data)} -> {len(balanced)} rows; wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    train = load_table(args.train, args.schema)
    test = load_table(args.test, args.schema)
    model = train_logreg(train, args.lam, include_protected=not args.exclude_protected)
    rec = MetricsRecord(args.label, None, None, 0, 0, False,
                        hyperparameters={"classifier_lambda": args.lam})
    rec.minority_prop = minority_proportion(train)
    evaluate_predictions(predict(model, test), rec)
    out = {"eod_tpr": rec.eod_tpr, "eod_fpr": rec.eod_fpr, "eod_abs": rec.eod_abs, "f1": rec.f1,
           "train_minority_prop": rec.minority_prop, "status": rec.status, "error": rec.error}
    print(json.dumps(out, indent=2))
    return 0


def spec_from_args(args) -> RunSpec:
    cfg: dict = {}
    if args.config:
        with open(args.config) as fh:
            cfg = {k.replace("-", "_"): v for k, v in (yaml.safe_load(fh) or {}).items()}
    overrides = {
        "dataset": args.dataset, "schema": args.schema, "synthesizer": args.synth,
        "eps_grid": _eps_grid(args.eps_grid) if args.eps_grid else None, "trials": args.trials,
        "preprocess": args.preprocess, "seed": args.seed, "out": args.out, "jobs": args.jobs,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.test_mode_no_noise:
        cfg["no_noise"] = True
    return RunSpec.from_dict(cfg)


def cmd_matrix(args) -> int:
    spec = spec_from_args(args)
    if spec.no_noise and os.environ.get(TEST_BUILD_ENV) != "1":
        raise SystemExit(f"noise can only be disabled when {TEST_BUILD_ENV}=1")
    if not spec.out:
        raise SystemExit("matrix needs an output directory (--out or 'out' in the config)")
    results, baselines = run_all(spec)
    n_bad = sum(1 for r in results if not r.record.ok)
    print(f"{len(results)} runs ({n_bad} flagged/failed); reports in {spec.out}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    results = load_results(out)
    baselines = load_baselines(out)
    spec = None
    manifest = out / "manifest.json"
    if manifest.exists():
        with open(manifest) as fh:
            spec = RunSpec.from_dict(json.load(fh)["spec"])
    emit_reports(results, baselines, args.report_dir or out, spec)
    print(f"re-emitted reports for {len(results)} runs")
    return 0


def cmd_make_fixture(args) -> int:
    from .datasets import planted_bias_dataset

    data = planted_bias_dataset(args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_table(data, out / "planted_bias.csv")
    write_schema(data.schema, out / "planted_bias.yaml")
    print(f"wrote {out / 'planted_bias.csv'} and {out / 'planted_bias.yaml'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpfair", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate one DP synthetic table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--synth", choices=SYNTHESIZERS, default="mst")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, default=RunSpec.delta)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ledger", help="write the privacy ledger transcript here")
    _add_hidden_test_flag(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("balance", help="multi-label undersampling of a table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file (default: overwrite the input)")
    p.set_defaults(func=cmd_balance)

    p = sub.add_parser("evaluate", help="train the downstream classifier and audit it on a test table")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--exclude-protected", action="store_true")
    p.add_argument("--label", default="evaluated", help="synthesizer name to record")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="run the synthesizer x epsilon x trial x preprocessing matrix")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--schema")
    p.add_argument("--synth", choices=SYNTHESIZERS)
    p.add_argument("--eps-grid", help="comma-separated, e.g. 1,2,3")
    p.add_argument("--trials", type=int)
    p.add_argument("--preprocess", choices=list(PREPROCESS_ARMS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    _add_hidden_test_flag(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="re-emit report tables from a finished matrix directory")
    p.add_argument("--out", required=True, help="matrix output directory")
    p.add_argument("--report-dir", help="write reports here instead")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-fixture", help="write the planted-bias demo table and its schema")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
