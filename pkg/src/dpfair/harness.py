"""Run matrix orchestration: split, optional balancing, synthesis, downstream
training and evaluation, persistence and report tables.

Seed discipline
---------------
Everything random derives from ``RunSpec.seed`` (the master seed):

* train/test split: ``split_train_test(data, test_fraction, seed=master)``
* cell (synthesizer s, epsilon index e, trial t, arm p):
  ``SeedSequence(master, spawn_key=(s, e, t, p))`` seeds one PCG64 stream used,
  in order, for the undersampling seed and then all synthesizer randomness.
  ``s`` is the synthesizer's position in :data:`SYNTHESIZERS`; ``p`` is 1 for
  the balanced arm.
* balanced baseline: ``SeedSequence(master, spawn_key=(BASELINE_KEY,))``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .classifier import DEFAULT_LAMBDA, SingleClassError, predict, train_logreg
from .fairness import MetricsRecord, aggregate, evaluate_predictions
from .mechanisms import DEFAULT_DELTA, Budget, BudgetLedger, OverspendError, make_rng, noise_disabled
from .mst import PHASE_FRACTIONS, mst_synthesize
from .mwem import DEFAULT_ITERATIONS, DEFAULT_MAX_WAY, DEFAULT_QUERY_CAP, mwem_synthesize
from .quail import DEFAULT_DP_LAMBDA, QuailConfig, quail_synthesize
from .tabular import Dataset, load_table, minority_proportion, split_train_test, write_table
from .undersample import multilabel_undersample

SYNTHESIZERS = ("mwem", "mst", "quail-mwem")
PREPROCESS_ARMS = {"off": (False,), "on": (True,), "both": (False, True)}
DEFAULT_EPS_GRID = tuple(float(e) for e in range(1, 9))
BASELINE_KEY = 9999
LEDGER_TOL = 1e-12

METRIC_FIELDS = ("synthesizer", "preprocess", "epsilon", "delta", "trial", "seed", "status",
                 "eod_tpr", "eod_fpr", "eod_abs", "f1", "minority_prop", "error")


class AccountingError(RuntimeError):
    """A ledger did not add up to the cell's budget: a bug, never a data problem."""


@dataclass
class RunSpec:
    dataset: str | None = None
    schema: str | None = None
    synthesizer: str = "mst"
    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID
    trials: int = 10
    preprocess: str = "both"
    seed: int = 0
    out: str | None = None
    test_fraction: float = 0.2
    delta: float = DEFAULT_DELTA
    mwem_iterations: int = DEFAULT_ITERATIONS
    mwem_max_way: int = DEFAULT_MAX_WAY
    mwem_query_cap: int = DEFAULT_QUERY_CAP
    mst_phase_fractions: tuple[float, ...] = PHASE_FRACTIONS
    quail_synth_fraction: float = 0.5
    quail_lambda: float = DEFAULT_DP_LAMBDA
    classifier_lambda: float = DEFAULT_LAMBDA
    include_protected: bool = True
    persist_synthetic: bool = True
    jobs: int = 1
    no_noise: bool = False

    def __post_init__(self):
        self.eps_grid = tuple(float(e) for e in self.eps_grid)
        self.mst_phase_fractions = tuple(float(f) for f in self.mst_phase_fractions)
        if self.synthesizer not in SYNTHESIZERS:
            raise ValueError(f"unknown synthesizer {self.synthesizer!r}; choose from {SYNTHESIZERS}")
        if not self.eps_grid or any(e <= 0 for e in self.eps_grid):
            raise ValueError("epsilon grid must be non-empty and positive")
        if any(b <= a for a, b in zip(self.eps_grid, self.eps_grid[1:])):
            raise ValueError("epsilon grid must be strictly increasing")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.preprocess not in PREPROCESS_ARMS:
            raise ValueError(f"preprocess must be one of {list(PREPROCESS_ARMS)}")

    @property
    def arms(self) -> tuple[bool, ...]:
        return PREPROCESS_ARMS[self.preprocess]

    def hyperparameters(self) -> dict[str, Any]:
        hp: dict[str, Any] = {
            "test_fraction": self.test_fraction,
            "classifier_lambda": self.classifier_lambda,
            "include_protected": self.include_protected,
        }
        if self.synthesizer in ("mwem", "quail-mwem"):
            hp.update(mwem_iterations=self.mwem_iterations, mwem_max_way=self.mwem_max_way,
                      mwem_query_cap=self.mwem_query_cap)
        if self.synthesizer == "mst":
            hp.update(delta=self.delta, mst_phase_fractions=list(self.mst_phase_fractions),
                      mst_model="tree-structured (spanning tree of 2-way marginals)")
        if self.synthesizer == "quail-mwem":
            hp.update(quail_synth_fraction=self.quail_synth_fraction, quail_lambda=self.quail_lambda)
        return hp

    def synth_delta(self) -> float:
        return self.delta if self.synthesizer == "mst" else 0.0

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["eps_grid"] = list(self.eps_grid)
        d["mst_phase_fractions"] = list(self.mst_phase_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        clean = {k.replace("-", "_"): v for k, v in d.items()}
        unknown = set(clean) - names
        if unknown:
            raise ValueError(f"unknown RunSpec keys: {sorted(unknown)}")
        return cls(**clean)


@dataclass
class RunResult:
    record: MetricsRecord
    ledger: dict | None = None
    synthetic_path: str | None = None
    ledger_path: str | None = None
    lineage: list[str] = field(default_factory=list)
    duration: float = 0.0


def synthesize(name: str, data: Dataset, epsilon: float, ledger: BudgetLedger, rng, spec: RunSpec) -> Dataset:
    """Dispatch to a synthesizer; output has ``len(data)`` rows over ``data.schema``."""

    def mwem(d, eps, led, r):
        return mwem_synthesize(d, eps, led, r, iterations=spec.mwem_iterations, max_way=spec.mwem_max_way,
                               query_cap=spec.mwem_query_cap)

    if name == "mwem":
        return mwem(data, epsilon, ledger, rng)
    if name == "mst":
        return mst_synthesize(data, epsilon, spec.delta, ledger, rng, phase_fractions=spec.mst_phase_fractions)
    if name == "quail-mwem":
        cfg = QuailConfig(spec.quail_synth_fraction, spec.quail_lambda)
        return quail_synthesize(data, mwem, epsilon, cfg, ledger, rng)
    raise ValueError(f"unknown synthesizer {name!r}")


def cell_seed(spec: RunSpec, eps_index: int, trial: int, balanced: bool) -> np.random.SeedSequence:
    return np.random.SeedSequence(spec.seed, spawn_key=(SYNTHESIZERS.index(spec.synthesizer), eps_index,
                                                        trial, int(balanced)))


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def audit_ledger(ledger: BudgetLedger, budget: Budget) -> None:
    spent = ledger.spent
    if abs(spent.epsilon - budget.epsilon) > LEDGER_TOL or abs(spent.delta - budget.delta) > LEDGER_TOL:
        raise AccountingError(f"ledger spent {spent} but the cell budget is {budget}")

    def walk(led: BudgetLedger):
        for e in led.entries:
            if e.children is not None:
                s = e.children.spent
                if abs(s.epsilon - e.budget.epsilon) > LEDGER_TOL or abs(s.delta - e.budget.delta) > LEDGER_TOL:
                    raise AccountingError(f"sub-ledger {e.label!r} spent {s}, reserved {e.budget}")
                walk(e.children)

    walk(ledger)


def _cell_dir(spec: RunSpec, eps: float, trial: int, balanced: bool) -> Path:
    arm = "balanced" if balanced else "raw"
    return Path(spec.out) / "runs" / spec.synthesizer / arm / f"eps_{eps:g}" / f"trial_{trial:02d}"


def run_cell(spec: RunSpec, train: Dataset, test: Dataset, eps_index: int, trial: int, balanced: bool) -> RunResult:
    t0 = time.perf_counter()
    eps = spec.eps_grid[eps_index]
    seq = cell_seed(spec, eps_index, trial, balanced)
    rng = make_rng(seq)
    seed = _seed_int(seq)
    budget = Budget(eps, spec.synth_delta())
    record = MetricsRecord(spec.synthesizer, eps, budget.delta, trial, seed, balanced,
                           hyperparameters=spec.hyperparameters())
    result = RunResult(record, lineage=["real:train"])
    ledger = BudgetLedger(budget)
    ctx = noise_disabled() if spec.no_noise else nullcontext()
    try:
        with ctx:
            source = train
            if balanced:
                source = multilabel_undersample(train, seed=int(rng.integers(2 ** 62)))
                result.lineage.append("undersampled")
            synth = synthesize(spec.synthesizer, source, eps, ledger, rng, spec)
            result.lineage.append(f"synthetic:{spec.synthesizer}")
        audit_ledger(ledger, budget)
        result.ledger = ledger.transcript()
        record.minority_prop = minority_proportion(synth)
        if spec.out and spec.persist_synthetic:
            d = _cell_dir(spec, eps, trial, balanced)
            write_table(synth, d / "synthetic.csv")
            with open(d / "ledger.json", "w") as fh:
                json.dump(result.ledger, fh, indent=2)
            result.synthetic_path = str(d / "synthetic.csv")
            result.ledger_path = str(d / "ledger.json")
        model = train_logreg(synth, spec.classifier_lambda, include_protected=spec.include_protected)
        evaluate_predictions(predict(model, test), record)
        result.lineage.append("evaluated:real:test")
    except (OverspendError, AccountingError):
        raise
    except SingleClassError as exc:
        record.status, record.error = "flagged", str(exc)
    except Exception as exc:  # noqa: BLE001 - failures are recorded, never fatal
        record.status, record.error = "error", f"{type(exc).__name__}: {exc}"
    if result.ledger is None and ledger.entries:
        result.ledger = ledger.transcript()
    result.duration = time.perf_counter() - t0
    return result


def load_spec_data(spec: RunSpec) -> Dataset:
    if not spec.dataset or not spec.schema:
        raise ValueError("RunSpec needs dataset and schema paths")
    return load_table(spec.dataset, spec.schema)


def cells(spec: RunSpec) -> list[tuple[int, int, bool]]:
    return [(p, e, t) for p in spec.arms for e in range(len(spec.eps_grid)) for t in range(spec.trials)]


def _run_cell_star(args):
    return run_cell(*args)


def run_matrix(spec: RunSpec, data: Dataset | None = None) -> list[RunResult]:
    """All (preprocess arm, epsilon, trial) cells in a fixed order over one shared split."""
    data = data if data is not None else load_spec_data(spec)
    split = split_train_test(data, spec.test_fraction, spec.seed)
    jobs = [(spec, split.train, split.test, e, t, p) for p, e, t in cells(spec)]
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            return list(pool.map(_run_cell_star, jobs, chunksize=4))
    return [run_cell(*j) for j in jobs]


def run_baseline(spec: RunSpec, data: Dataset | None = None, balanced: bool = False) -> MetricsRecord:
    """Downstream metrics from the real training split (the non-private reference)."""
    data = data if data is not None else load_spec_data(spec)
    split = split_train_test(data, spec.test_fraction, spec.seed)
    train = split.train
    seed = spec.seed
    if balanced:
        seed = _seed_int(np.random.SeedSequence(spec.seed, spawn_key=(BASELINE_KEY,)))
        train = multilabel_undersample(train, seed=seed)
    record = MetricsRecord("non-private", None, None, 0, seed, balanced,
                           hyperparameters={"classifier_lambda": spec.classifier_lambda,
                                            "include_protected": spec.include_protected,
                                            "test_fraction": spec.test_fraction})
    record.minority_prop = minority_proportion(train)
    model = train_logreg(train, spec.classifier_lambda, include_protected=spec.include_protected)
    return evaluate_predictions(predict(model, split.test), record)


# -- reports -----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(f)) for f in fields])


def record_row(rec: MetricsRecord) -> dict:
    row = {f: getattr(rec, f) for f in METRIC_FIELDS if f != "eod_abs"}
    row["eod_abs"] = rec.eod_abs
    if rec.epsilon is None:
        row["epsilon"] = "non-private"
    return row


def record_to_dict(rec: MetricsRecord) -> dict:
    return dataclasses.asdict(rec)


def record_from_dict(d: dict) -> MetricsRecord:
    return MetricsRecord(**d)


SUMMARY_FIELDS = ("synthesizer", "preprocess", "metric", "n_runs", "n_flagged", "count", "mean", "min", "q1",
                  "median", "q3", "max")


def emit_reports(results: Sequence[RunResult], baselines: Sequence[MetricsRecord], out_dir,
                 spec: RunSpec | None = None) -> dict[str, Path]:
    """Write per-run metrics, minority-proportion boxplot stats, grouped metric
    means with baseline references, a structured summary and a manifest."""
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [r.record for r in results]
    paths = {}

    paths["metrics"] = out / "metrics.csv"
    _write_csv(paths["metrics"], METRIC_FIELDS, [record_row(r) for r in records])
    paths["baselines"] = out / "baselines.csv"
    _write_csv(paths["baselines"], METRIC_FIELDS, [record_row(b) for b in baselines])

    ref = {b.preprocess: b for b in baselines}
    raw_ref = ref.get(False)

    box = aggregate(records, ["synthesizer", "preprocess"], metrics=["minority_prop"])
    for row in box:
        row["reference"] = raw_ref.minority_prop if raw_ref else None
    paths["minority_boxplot"] = out / "minority_boxplot.csv"
    _write_csv(paths["minority_boxplot"], SUMMARY_FIELDS + ("reference",), box)

    means = aggregate(records, ["synthesizer", "preprocess"], metrics=["eod_tpr", "eod_fpr", "eod_abs", "f1"])
    for row in means:
        b = ref.get(row["preprocess"])
        row["baseline"] = b.get(row["metric"]) if b else None
        row["baseline_raw"] = raw_ref.get(row["metric"]) if raw_ref else None
    paths["fairness_means"] = out / "fairness_means.csv"
    _write_csv(paths["fairness_means"], SUMMARY_FIELDS + ("baseline", "baseline_raw"), means)

    by_eps = aggregate(records, ["synthesizer", "preprocess", "epsilon"])
    paths["by_epsilon"] = out / "by_epsilon.csv"
    _write_csv(paths["by_epsilon"], ("synthesizer", "preprocess", "epsilon") + SUMMARY_FIELDS[2:], by_eps)

    paths["summary"] = out / "summary.json"
    with open(paths["summary"], "w") as fh:
        json.dump({"minority_boxplot": box, "fairness_means": means, "by_epsilon": by_eps,
                   "baselines": [record_to_dict(b) for b in baselines]}, fh, indent=2, sort_keys=True)

    paths["results"] = out / "results.json"
    with open(paths["results"], "w") as fh:
        json.dump([{"record": record_to_dict(r.record), "ledger": r.ledger, "synthetic_path": r.synthetic_path,
                    "ledger_path": r.ledger_path, "lineage": r.lineage} for r in results], fh, indent=2)

    paths["timings"] = out / "timings.csv"
    _write_csv(paths["timings"], ("synthesizer", "preprocess", "epsilon", "trial", "seconds"),
               [{"synthesizer": r.record.synthesizer, "preprocess": r.record.preprocess,
                 "epsilon": r.record.epsilon, "trial": r.record.trial, "seconds": round(r.duration, 4)}
                for r in results])

    if spec is not None:
        paths["manifest"] = out / "manifest.json"
        with open(paths["manifest"], "w") as fh:
            json.dump(build_manifest(spec, results), fh, indent=2, sort_keys=True)
    return paths


def build_manifest(spec: RunSpec, results: Sequence[RunResult]) -> dict:
    return {
        "tool": "dpfair",
        "version": __version__,
        "spec": spec.to_dict(),
        "hyperparameters": spec.hyperparameters(),
        "defaults_not_from_source": {
            "mwem_iterations": spec.mwem_iterations,
            "mwem_workload": f"all 1-way + random {spec.mwem_max_way}-way marginals, cap {spec.mwem_query_cap}",
            "classifier_lambda": spec.classifier_lambda,
            "delta": spec.delta,
            "test_fraction": spec.test_fraction,
            "quail_synth_fraction": spec.quail_synth_fraction,
            "quail_lambda": spec.quail_lambda,
            "mst_phase_fractions": list(spec.mst_phase_fractions),
            "mst_delta_split": "1/2 node measurements, 1/2 edge measurements",
        },
        "notes": [
            "MST is tree-structured: one spanning tree of 2-way marginals replaces general graphical-model inference.",
            "Privacy accounting is sequential composition; Gaussian noise uses sigma = s*sqrt(2 ln(1.25/delta))/eps.",
            "Neighboring datasets differ by replacing one record.",
            "Schemas for Adult/COMPAS/ACS Income shipped with the tool are best-effort column subsets and binnings.",
        ],
        "seed_derivation": "split: master seed; cell: SeedSequence(master, spawn_key=(synth_index, eps_index, "
                           "trial, balanced)); balanced baseline: SeedSequence(master, spawn_key=(9999,))",
        "cells": len(results),
        "noise_disabled": spec.no_noise,
    }


def load_results(out_dir) -> list[RunResult]:
    with open(Path(out_dir) / "results.json") as fh:
        raw = json.load(fh)
    results = [RunResult(record_from_dict(r["record"]), r["ledger"], r["synthetic_path"], r["ledger_path"],
                         r["lineage"]) for r in raw]
    # wall-clock times live only in timings.csv so the other outputs stay reproducible
    timings = Path(out_dir) / "timings.csv"
    if timings.exists():
        with open(timings, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) == len(results):
            for res, row in zip(results, rows):
                res.duration = float(row["seconds"])
    return results


def load_baselines(out_dir) -> list[MetricsRecord]:
    with open(Path(out_dir) / "summary.json") as fh:
        raw = json.load(fh)
    return [record_from_dict(b) for b in raw["baselines"]]


def run_all(spec: RunSpec, data: Dataset | None = None) -> tuple[list[RunResult], list[MetricsRecord]]:
    """Matrix plus baselines for each preprocessing arm, with reports if ``spec.out`` is set."""
    data = data if data is not None else load_spec_data(spec)
    results = run_matrix(spec, data)
    baselines = [run_baseline(spec, data, balanced=False)]
    if True in spec.arms:
        baselines.append(run_baseline(spec, data, balanced=True))
    if spec.out:
        emit_reports(results, baselines, spec.out, spec)
    return results, baselines


def ledger_total(transcript: dict) -> tuple[float, float]:
    return (math.fsum(e["epsilon"] for e in transcript["entries"]),
            math.fsum(e["delta"] for e in transcript["entries"]))
