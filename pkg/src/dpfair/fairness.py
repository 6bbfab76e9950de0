"""Equalized-odds distances, F1, and boxplot-ready aggregation of run metrics.

Group A=0 is the unprivileged group and A=1 the privileged one; distances are
signed as rate(A=1) - rate(A=0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Sequence

import numpy as np

from .classifier import PredictionSet

METRICS = ("eod_tpr", "eod_fpr", "eod_abs", "f1", "minority_prop")


class UndefinedRateError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def tpr(self) -> float | None:
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def fpr(self) -> float | None:
        neg = self.fp + self.tn
        return self.fp / neg if neg else None


@dataclass(frozen=True)
class GroupRates:
    """Confusion tallies for A=0 and A=1; a rate is ``None`` when its denominator is 0."""

    group0: Confusion
    group1: Confusion

    @property
    def undefined(self) -> list[str]:
        names = []
        for a, conf in ((0, self.group0), (1, self.group1)):
            if conf.tpr is None:
                names.append(f"tpr(A={a})")
            if conf.fpr is None:
                names.append(f"fpr(A={a})")
        return names


def _confusion(y_pred: np.ndarray, y_true: np.ndarray) -> Confusion:
    return Confusion(
        tp=int(np.sum((y_pred == 1) & (y_true == 1))),
        fp=int(np.sum((y_pred == 1) & (y_true == 0))),
        fn=int(np.sum((y_pred == 0) & (y_true == 1))),
        tn=int(np.sum((y_pred == 0) & (y_true == 0))),
    )


def group_rates(preds: PredictionSet) -> GroupRates:
    if len(preds) == 0:
        raise ValueError("no predictions")
    g0 = preds.group == 0
    g1 = preds.group == 1
    return GroupRates(
        _confusion(preds.y_pred[g0], preds.y_true[g0]),
        _confusion(preds.y_pred[g1], preds.y_true[g1]),
    )


def equalized_odds_distances(rates: GroupRates) -> tuple[float, float]:
    """(tpr(1) - tpr(0), fpr(1) - fpr(0))."""
    missing = rates.undefined
    if missing:
        raise UndefinedRateError(f"undefined rate(s): {', '.join(missing)}")
    g0, g1 = rates.group0, rates.group1
    # exact rational differences, rounded once: 8/10 - 3/6 gives 0.3, not 0.30000000000000004
    tpr = Fraction(g1.tp, g1.tp + g1.fn) - Fraction(g0.tp, g0.tp + g0.fn)
    fpr = Fraction(g1.fp, g1.fp + g1.tn) - Fraction(g0.fp, g0.fp + g0.tn)
    return float(tpr), float(fpr)


def f1_score(preds: PredictionSet) -> float:
    if len(preds) == 0:
        raise ValueError("no predictions")
    c = _confusion(preds.y_pred, preds.y_true)
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 0.0


def eod_magnitude(eod_tpr: float, eod_fpr: float) -> float:
    """Scalar unfairness: mean of the two absolute distances."""
    return 0.5 * (abs(eod_tpr) + abs(eod_fpr))


@dataclass
class MetricsRecord:
    synthesizer: str
    epsilon: float | None
    delta: float | None
    trial: int
    seed: int
    preprocess: bool
    eod_tpr: float | None = None
    eod_fpr: float | None = None
    f1: float | None = None
    minority_prop: float | None = None
    status: str = "ok"
    error: str = ""
    hyperparameters: dict[str, Any] = field(default_factory=dict)

    @property
    def eod_abs(self) -> float | None:
        if self.eod_tpr is None or self.eod_fpr is None:
            return None
        return eod_magnitude(self.eod_tpr, self.eod_fpr)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def get(self, key: str):
        return getattr(self, key)


def evaluate_predictions(preds: PredictionSet, record: MetricsRecord) -> MetricsRecord:
    """Fill fairness/accuracy fields; undefined rates flag the record instead of raising."""
    record.f1 = f1_score(preds)
    try:
        record.eod_tpr, record.eod_fpr = equalized_odds_distances(group_rates(preds))
    except UndefinedRateError as exc:
        record.status = "flagged"
        record.error = str(exc)
    return record


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """(Q1, median, Q3) by the median-exclusive rule.

    The sorted sample is split into a lower and upper half, leaving out the
    middle element when the count is odd; Q1 and Q3 are the medians of the
    halves.  A single value is its own Q1/Q3.
    """
    xs = sorted(values)
    n = len(xs)
    if n == 0:
        raise ValueError("no values")

    def med(v):
        m = len(v)
        return v[m // 2] if m % 2 else 0.5 * (v[m // 2 - 1] + v[m // 2])

    if n == 1:
        return xs[0], xs[0], xs[0]
    half = n // 2
    return med(xs[:half]), med(xs), med(xs[n - half:])


def summarize(values: Sequence[float]) -> dict[str, float]:
    q1, q2, q3 = quartiles(values)
    return {
        "count": len(values),
        "mean": math.fsum(values) / len(values),
        "min": min(values),
        "q1": q1,
        "median": q2,
        "q3": q3,
        "max": max(values),
    }


def aggregate(records: Iterable[MetricsRecord], group_by: Sequence[str],
              metrics: Sequence[str] = METRICS) -> list[dict[str, Any]]:
    """One summary row per (group, metric); groups appear in first-seen order.

    Missing values (e.g. distances of a flagged run) are skipped; ``n_flagged``
    counts runs whose status is not "ok".
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault(tuple(r.get(k) for k in group_by), []).append(r)
    rows = []
    for key, members in groups.items():
        n_flagged = sum(1 for r in members if not r.ok)
        for metric in metrics:
            vals = [r.get(metric) for r in members if r.get(metric) is not None]
            row = dict(zip(group_by, key))
            row.update(metric=metric, n_runs=len(members), n_flagged=n_flagged)
            if vals:
                row.update(summarize(vals))
            else:
                row.update(count=0, mean=None, min=None, q1=None, median=None, q3=None, max=None)
            rows.append(row)
    return rows
