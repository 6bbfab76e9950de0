import math

import numpy as np
import pytest

from dpfair.mechanisms import Budget, BudgetLedger, OverspendError, make_rng, noise_disabled
from dpfair.mwem import (
    HistogramDistribution,
    MarginalQuery,
    Workload,
    WorkloadError,
    build_workload,
    evaluate_query,
    evaluate_query_on_dist,
    mwem_fit,
    mwem_synthesize,
    sample_synthetic,
)
from dpfair.tabular import Dataset, Schema


def _data(cards, rows):
    return Dataset(Schema.simple(cards), np.asarray(rows, dtype=np.int64).reshape(-1, len(cards)))


def skewed_4x4(n=1000, seed=0):
    rng = make_rng(seed)
    p = np.arange(1, 17, dtype=float) ** 2
    cells = rng.choice(16, size=n, p=p / p.sum())
    return _data((4, 4), np.stack(np.unravel_index(cells, (4, 4)), axis=1))


def mw_oracle(data, workload, iterations):
    """Noise-free MW replayed cell by cell with plain Python loops."""
    schema = data.schema
    n = len(data)
    cells = [np.unravel_index(j, schema.cardinalities) for j in range(schema.domain_size)]
    w = [1.0 / len(cells)] * len(cells)
    truth = [evaluate_query(q, data) for q in workload]

    def member(q, x):
        return all(x[c] == v for c, v in zip(q.columns, q.cell))

    for _ in range(iterations):
        est = [n * sum(wx for wx, x in zip(w, cells) if member(q, x)) for q in workload]
        errs = [abs(t - e) for t, e in zip(truth, est)]
        i = errs.index(max(errs))
        q = workload.queries[i]
        w = [wx * math.exp((truth[i] - est[i]) / (2 * n)) if member(q, x) else wx for wx, x in zip(w, cells)]
        total = math.fsum(w)
        w = [wx / total for wx in w]
    return np.array(w)


def test_workload_sizes():
    schema = Schema.simple((2, 2))
    assert len(build_workload(schema, 1, make_rng(0), 100)) == 4
    assert len(build_workload(schema, 2, make_rng(0), 8)) == 8
    with pytest.raises(WorkloadError, match="below"):
        build_workload(schema, 1, make_rng(0), 2)
    with pytest.raises(WorkloadError):
        build_workload(schema, 4, make_rng(0), 100)


def test_workload_deterministic_and_capped():
    schema = Schema.simple((3, 3, 3, 3, 3))
    a = build_workload(schema, 3, make_rng(7), 60)
    b = build_workload(schema, 3, make_rng(7), 60)
    assert a.queries == b.queries
    assert len(a) <= 60
    assert sum(len(q.columns) == 1 for q in a) == 15


def test_workload_rejects_duplicates_and_empty():
    q = MarginalQuery((0,), (1,))
    with pytest.raises(WorkloadError):
        Workload([q, q])
    with pytest.raises(WorkloadError):
        Workload([])
    with pytest.raises(WorkloadError):
        MarginalQuery((1, 0), (0, 0))


def test_evaluate_query_examples():
    d = _data((2,), [[0], [1], [1]])
    assert evaluate_query(MarginalQuery((0,), (1,)), d) == 2
    assert evaluate_query(MarginalQuery((0,), (1,)), d.take([])) == 0
    d = skewed_4x4(200)
    assert sum(evaluate_query(MarginalQuery((1,), (v,)), d) for v in range(4)) == 200
    with pytest.raises(WorkloadError):
        evaluate_query(MarginalQuery((2,), (0,)), d)


def test_evaluate_query_on_dist():
    schema = Schema.simple((2, 2))
    uni = HistogramDistribution.uniform(schema)
    assert evaluate_query_on_dist(MarginalQuery((0,), (1,)), uni, 100) == 50.0
    point = HistogramDistribution(schema, np.array([0.0, 0.0, 1.0, 0.0]))
    assert evaluate_query_on_dist(MarginalQuery((0, 1), (1, 0)), point, 37) == 37.0


def test_single_step_increases_mass_cell():
    data = _data((2, 2), [[1, 0]] * 10)
    wl = build_workload(data.schema, 2, make_rng(0), 8)
    seen = []
    with noise_disabled():
        dist = mwem_fit(data, wl, 1.0, 1, BudgetLedger(Budget(1.0)), make_rng(0),
                        callback=lambda t, i, w: seen.append(i))
    # hand oracle: the (1,0) cell query has error |10 - 2.5| = 7.5, 1-way queries 5.0
    assert wl.queries[seen[0]] == MarginalQuery((0, 1), (1, 0))
    factor = math.exp(7.5 / 20)
    expected = np.array([1, 1, factor, 1]) / (3 + factor)
    assert np.allclose(dist.weights, expected, atol=1e-15)
    assert dist.weights[2] > 0.25


def test_uniform_data_is_a_fixed_point():
    rows = [[a, b] for a in range(3) for b in range(2)] * 5
    data = _data((3, 2), rows)
    wl = build_workload(data.schema, 2, make_rng(1), 100)
    with noise_disabled():
        dist = mwem_fit(data, wl, 1.0, 5, BudgetLedger(Budget(1.0)), make_rng(1))
    assert np.allclose(dist.weights, 1 / 6, atol=1e-9)


def test_matches_brute_force_oracle():
    data = skewed_4x4(300, seed=3)
    wl = build_workload(data.schema, 2, make_rng(0), 100)
    with noise_disabled():
        dist = mwem_fit(data, wl, 1.0, 25, BudgetLedger(Budget(1.0)), make_rng(0))
    oracle = mw_oracle(data, wl, 25)
    n = len(data)
    for q in wl:
        ours = evaluate_query_on_dist(q, dist, n)
        ref = n * oracle[[j for j in range(16) if all(
            np.unravel_index(j, (4, 4))[c] == v for c, v in zip(q.columns, q.cell))]].sum()
        assert abs(ours - ref) < 1e-6


def test_noise_free_converges_to_data_answers():
    data = _data((2, 2), [[0, 0]] * 10 + [[0, 1]] * 30 + [[1, 0]] * 20 + [[1, 1]] * 40)
    wl = build_workload(data.schema, 2, make_rng(0), 8)
    with noise_disabled():
        dist = mwem_fit(data, wl, 1.0, 400, BudgetLedger(Budget(1.0)), make_rng(0))
    for q in wl:
        assert abs(evaluate_query_on_dist(q, dist, len(data)) - evaluate_query(q, data)) < 1e-6


def max_error(data, wl, dist):
    truth = wl.answers(data.histogram().reshape(data.schema.cardinalities))
    return np.max(np.abs(truth - len(data) * wl.answers(dist.tensor)))


def test_fit_beats_uniform_on_skewed_toy():
    data = skewed_4x4(1000)
    wins = 0
    for seed in range(10):
        rng = make_rng(seed)
        wl = build_workload(data.schema, 2, rng, 100)
        dist = mwem_fit(data, wl, 8.0, 10, BudgetLedger(Budget(8.0)), rng)
        wins += max_error(data, wl, dist) < max_error(data, wl, HistogramDistribution.uniform(data.schema))
    assert wins >= 9


def test_ledger_records_exactly_epsilon():
    data = skewed_4x4(100)
    led = BudgetLedger(Budget(3.0))
    mwem_synthesize(data, 3.0, led, make_rng(0), iterations=7)
    assert led.spent.epsilon == pytest.approx(3.0, abs=1e-12)
    (entry,) = led.entries
    assert len(entry.children.entries) == 14
    with pytest.raises(OverspendError):
        mwem_synthesize(data, 3.5, BudgetLedger(Budget(3.0)), make_rng(0))


def test_sampling():
    schema = Schema.simple((2, 2))
    point = HistogramDistribution(schema, np.array([0.0, 1.0, 0.0, 0.0]))
    assert np.all(sample_synthetic(point, 50, make_rng(0)).codes == [0, 1])
    out = sample_synthetic(HistogramDistribution.uniform(schema), 100_000, make_rng(0))
    assert np.allclose(out.histogram() / 1e5, 0.25, atol=0.01)
    with pytest.raises(ValueError):
        sample_synthetic(point, 0, make_rng(0))
    a = sample_synthetic(HistogramDistribution.uniform(schema), 20, make_rng(4))
    assert a == sample_synthetic(HistogramDistribution.uniform(schema), 20, make_rng(4))
