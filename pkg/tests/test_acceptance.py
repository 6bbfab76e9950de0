"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""

import json
import math
import time
from collections import Counter

import numpy as np
import pytest

from dpfair.classifier import fit_logistic, logistic_gradient, logistic_objective, predict, train_logreg
from dpfair.datasets import planted_bias_dataset
from dpfair.fairness import equalized_odds_distances, f1_score, group_rates, quartiles
from dpfair.harness import RunSpec, run_all, run_baseline, run_matrix
from dpfair.mechanisms import Budget, BudgetLedger, exponential_probabilities, exponential_select, laplace_noise, \
    make_rng, noise_disabled
from dpfair.mst import mst_fit, sample_tree
from dpfair.mwem import HistogramDistribution, build_workload, evaluate_query_on_dist, mwem_fit
from dpfair.tabular import Dataset, Schema, group_counts, minority_proportion
from dpfair.undersample import multilabel_undersample
from tests.conftest import ACCEPTANCE_LINES, grouped_dataset
from tests.test_fairness import preds_from
from tests.test_mst import model_joint, pair_marginal, random_data
from tests.test_mwem import max_error, mw_oracle, skewed_4x4


def record(number, title, checks):
    """checks: list of (description, passed)."""
    ok = all(passed for _, passed in checks)
    failed = [desc for desc, passed in checks if not passed]
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
    if failed:
        line += " -- failed: " + "; ".join(failed)
    details = [f"    {'ok ' if passed else 'BAD'} {desc}" for desc, passed in checks]
    ACCEPTANCE_LINES.extend([line] + details)
    print("\n".join([line] + details))
    assert ok, line


def test_criterion_1_mechanisms():
    t0 = time.perf_counter()
    x = laplace_noise(1.0, 1.0, make_rng(0), size=1_000_000)
    var_ratio = x.var() / 2.0
    checks = [(f"Laplace variance / 2b^2 = {var_ratio:.4f}", abs(var_ratio - 1) <= 0.05)]
    for scores in ([0.0, 0.5, 1.0], [2.0, -1.0, 0.3], [0.0, 0.0, 0.0]):
        p = exponential_probabilities(scores, 1.0, 2.0)
        for seed in (0, 1, 2):
            idx = exponential_select(scores, 1.0, 2.0, make_rng(seed), size=100_000)
            tv = 0.5 * np.abs(np.bincount(idx, minlength=3) / 1e5 - p).sum()
            checks.append((f"TV {scores} seed {seed} = {tv:.4f}", tv <= 0.01))
    elapsed = time.perf_counter() - t0
    checks.append((f"runtime {elapsed:.2f}s < 10s", elapsed < 10))
    record(1, "mechanism correctness", checks)


def test_criterion_2_budget_accounting(tmp_path):
    data = planted_bias_dataset(1000, seed=0)
    checks = []
    for synth in ("mwem", "mst", "quail-mwem"):
        spec = RunSpec(synthesizer=synth, out=str(tmp_path / synth))
        results = run_matrix(spec, data)
        worst = 0.0
        for r in results:
            with open(r.ledger_path) as fh:
                t = json.load(fh)
            eps = math.fsum(e["epsilon"] for e in t["entries"])
            delta = math.fsum(e["delta"] for e in t["entries"])
            worst = max(worst, abs(eps - r.record.epsilon), abs(delta - spec.synth_delta()))
        checks.append((f"{synth}: {len(results)} persisted ledgers, worst gap {worst:.1e}",
                       len(results) == 160 and worst <= 1e-12))
    record(2, "budget accounting", checks)


def test_criterion_3_mwem():
    t0 = time.perf_counter()
    data = skewed_4x4(1000)
    uniform = HistogramDistribution.uniform(data.schema)
    wins = 0
    for seed in range(10):
        rng = make_rng(seed)
        wl = build_workload(data.schema, 2, rng, 100)
        dist = mwem_fit(data, wl, 8.0, 10, BudgetLedger(Budget(8.0)), rng)
        wins += bool(max_error(data, wl, dist) < max_error(data, wl, uniform))
    wl = build_workload(data.schema, 2, make_rng(0), 100)
    with noise_disabled():
        dist = mwem_fit(data, wl, 8.0, 10, BudgetLedger(Budget(8.0)), make_rng(0))
    oracle = HistogramDistribution(data.schema, mw_oracle(data, wl, 10))
    gap = max(abs(evaluate_query_on_dist(q, dist, len(data)) - evaluate_query_on_dist(q, oracle, len(data)))
              for q in wl)
    elapsed = time.perf_counter() - t0
    record(3, "MWEM optimization", [
        (f"beats uniform init in {wins}/10 seeds", wins >= 9),
        (f"noise-free answers vs brute-force oracle: max gap {gap:.1e}", gap <= 1e-6),
        (f"runtime {elapsed:.2f}s < 30s", elapsed < 30),
    ])


def test_criterion_4_mst():
    data = random_data((2, 3, 2, 4, 2, 2), 2000, seed=7)  # 192-cell domain
    n = len(data)
    with noise_disabled():
        model = mst_fit(data, 1.0, 1e-5, BudgetLedger(Budget(1.0, 1e-5)), make_rng(0))
    joint = model_joint(model)
    k = len(data.schema.columns)
    gap = 0.0
    for c in range(k):
        other = tuple(a for a in range(k) if a != c)
        gap = max(gap, np.abs(joint.sum(axis=other) - data.marginal((c,)) / n).max())
    for u, v in model.edges:
        gap = max(gap, np.abs(pair_marginal(joint, u, v) - data.marginal((u, v)) / n).max())
    synth = sample_tree(model, 100_000, make_rng(1))
    mc = 0.0
    for cols in [(c,) for c in range(k)] + list(model.edges):
        mc = max(mc, np.abs(synth.marginal(cols) / 1e5 - data.marginal(cols) / n).max())
    record(4, "MST fidelity", [
        (f"noise-free measured marginals vs brute-force joint: max gap {gap:.1e}", gap <= 1e-9),
        (f"sampled marginals at n=1e5: max cell gap {mc:.4f}", mc <= 0.01),
    ])


def test_criterion_5_undersampling():
    rng = make_rng(2024)
    bad = 0
    for i in range(1000):
        counts = {k: int(rng.integers(1, 40)) for k in [(0, 0), (0, 1), (1, 0), (1, 1)]}
        data = grouped_dataset(counts, extra_cards=(3, 2), seed=i)
        out = multilabel_undersample(data, seed=int(rng.integers(2**32)))
        m = min(counts.values())
        ok = (list(group_counts(out).values()) == [m] * 4 and minority_proportion(out) == 0.25
              and not Counter(map(tuple, out.codes.tolist())) - Counter(map(tuple, data.codes.tolist())))
        bad += not ok
    record(5, "undersampling exactness", [(f"{1000 - bad}/1000 random datasets exact", bad == 0)])


def test_criterion_6_fairness_metrics():
    tpr = equalized_odds_distances(group_rates(preds_from({1: (8, 1, 2, 9), 0: (3, 1, 3, 9)})))[0]
    f1 = f1_score(preds_from({0: (3, 1, 1, 5), 1: (3, 1, 1, 0)}))
    const = preds_from({0: (0, 0, 7, 13), 1: (0, 0, 12, 3)})
    d = equalized_odds_distances(group_rates(const))
    record(6, "fairness metrics", [
        (f"eod_tpr = {tpr!r}", tpr == 0.3),
        (f"f1 = {f1!r}", f1 == 0.75),
        (f"constant classifier distances {d}, f1 {f1_score(const)}", d == (0.0, 0.0) and f1_score(const) == 0.0),
    ])


def test_criterion_7_classifier():
    rng = make_rng(3)
    X = rng.normal(size=(60, 6))
    y = (rng.random(60) < 0.4).astype(float)
    pen = np.r_[np.ones(5), 0.0]
    worst = 0.0
    for _ in range(10):
        theta = rng.normal(size=6)
        g = logistic_gradient(theta, X, y, 0.2, pen)
        fd = np.array([(logistic_objective(theta + 1e-5 * e, X, y, 0.2, pen)
                        - logistic_objective(theta - 1e-5 * e, X, y, 0.2, pen)) / 2e-5 for e in np.eye(6)])
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    Xs = np.hstack([rng.normal(size=(400, 5)) * 3, np.ones((400, 1))])
    fit = fit_logistic(Xs, (rng.random(400) < 0.5).astype(float), 1e-4, pen)
    monotone = all(b <= a for a, b in zip(fit.history, fit.history[1:]))

    codes = rng.integers(0, 2, (200, 3))
    codes[:, 2] = codes[:, 1]
    sep = Dataset(Schema.simple((2, 2, 2), protected=0, label=2), codes)
    p = predict(train_logreg(sep, lam=1e-4), sep)
    acc = float(np.mean(p.y_pred == p.y_true))
    record(7, "classifier numerics", [
        (f"gradient vs central differences: worst relative error {worst:.1e}", worst < 1e-6),
        (f"objective non-increasing over {len(fit.history)} accepted steps", monotone),
        (f"separable toy accuracy {acc}", acc == 1.0),
    ])


def _iqr(values):
    q1, _, q3 = quartiles(values)
    return q3 - q1


def _mean(values):
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values)


def test_criterion_8_desk_scale_replication():
    t0 = time.perf_counter()
    data = planted_bias_dataset(5000, seed=0)
    base = run_baseline(RunSpec(), data)
    quail = run_matrix(RunSpec(synthesizer="quail-mwem"), data)
    mst = run_matrix(RunSpec(synthesizer="mst"), data)
    q_raw = [r.record for r in quail if not r.record.preprocess]
    q_bal = [r.record for r in quail if r.record.preprocess]
    m_raw = [r.record for r in mst if not r.record.preprocess]

    q_raw_mp = _mean([r.minority_prop for r in q_raw])
    q_raw_eod = _mean([r.eod_abs for r in q_raw])
    q_bal_mp = _mean([r.minority_prop for r in q_bal])
    q_bal_eod = _mean([r.eod_abs for r in q_bal])
    m_mp = _mean([r.minority_prop for r in m_raw])
    m_iqr, q_iqr = _iqr([r.minority_prop for r in m_raw]), _iqr([r.minority_prop for r in q_raw])
    m_f1 = _mean([r.f1 for r in m_raw])
    input_mp = base.minority_prop
    elapsed = time.perf_counter() - t0
    record(8, "desk-scale replication", [
        (f"(a) QUAIL-MWEM raw minority {q_raw_mp:.4f} <= {input_mp:.4f} + 0.02", q_raw_mp <= input_mp + 0.02),
        (f"(a) QUAIL-MWEM raw |eod| {q_raw_eod:.4f} > baseline {base.eod_abs:.4f}", q_raw_eod > base.eod_abs),
        (f"(b) balanced minority {q_bal_mp:.4f} in [0.15, 0.30]", 0.15 <= q_bal_mp <= 0.30),
        (f"(b) balanced |eod| {q_bal_eod:.4f} <= raw {q_raw_eod:.4f}", q_bal_eod <= q_raw_eod),
        (f"(c) MST minority {m_mp:.4f} within 0.05 of {input_mp:.4f}", abs(m_mp - input_mp) <= 0.05),
        (f"(c) MST IQR {m_iqr:.4f} < QUAIL-MWEM IQR {q_iqr:.4f}", m_iqr < q_iqr),
        (f"(d) MST F1 {m_f1:.4f} within 0.05 of baseline {base.f1:.4f}", abs(m_f1 - base.f1) <= 0.05),
        (f"runtime {elapsed:.1f}s < 900s", elapsed < 900),
    ])


def test_criterion_9_determinism(tmp_path):
    data = planted_bias_dataset(5000, seed=0)
    files = ("metrics.csv", "baselines.csv", "minority_boxplot.csv", "fairness_means.csv", "by_epsilon.csv",
             "summary.json")
    snapshots = []
    for name in ("first", "second"):
        out = tmp_path / name
        run_all(RunSpec(out=str(out)), data)
        snap = {f: (out / f).read_bytes() for f in files}
        snap.update({str(p.relative_to(out)): p.read_bytes() for p in sorted((out / "runs").rglob("*")) if p.is_file()})
        snapshots.append(snap)
    differing = [k for k in snapshots[0] if snapshots[0][k] != snapshots[1].get(k)]
    record(9, "determinism", [
        (f"{len(snapshots[0])} metrics/synthetic/ledger files byte-identical across reruns",
         not differing and snapshots[0].keys() == snapshots[1].keys()),
    ])
