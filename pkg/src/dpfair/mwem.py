"""MWEM: multiplicative weights over an explicit histogram, with exponential-
mechanism query selection and Laplace measurements."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .mechanisms import Budget, BudgetLedger, PrivacyError, Randomness, exponential_select, laplace_noise
from .tabular import Dataset, Schema

DEFAULT_ITERATIONS = 10
DEFAULT_MAX_WAY = 2
DEFAULT_QUERY_CAP = 400


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class MarginalQuery:
    """Counting query: rows whose values on ``columns`` equal ``cell``."""

    columns: tuple[int, ...]
    cell: tuple[int, ...]

    def __post_init__(self):
        if len(self.columns) != len(self.cell) or not self.columns:
            raise WorkloadError("columns and cell must be non-empty and of equal length")
        if any(b <= a for a, b in zip(self.columns, self.columns[1:])):
            raise WorkloadError(f"query columns must be strictly increasing, got {self.columns}")

    def validate(self, schema: Schema) -> None:
        k = len(schema.columns)
        for c, v in zip(self.columns, self.cell):
            if not 0 <= c < k or not 0 <= v < schema.cardinalities[c]:
                raise WorkloadError(f"query {self} does not fit schema {schema.cardinalities}")

    def index(self, ndim: int) -> tuple:
        """Index selecting the matching slab of a domain-shaped tensor."""
        sl: list = [slice(None)] * ndim
        for c, v in zip(self.columns, self.cell):
            sl[c] = v
        return tuple(sl)


class Workload:
    def __init__(self, queries: Sequence[MarginalQuery]):
        queries = tuple(queries)
        if not queries:
            raise WorkloadError("workload is empty")
        if len(set(queries)) != len(queries):
            raise WorkloadError("workload contains duplicate queries")
        self.queries = queries
        groups: dict[tuple[int, ...], tuple[list[int], list[tuple[int, ...]]]] = {}
        for i, q in enumerate(queries):
            pos, cells = groups.setdefault(q.columns, ([], []))
            pos.append(i)
            cells.append(q.cell)
        self._groups = [(cols, np.asarray(pos), tuple(np.asarray(cells).T)) for cols, (pos, cells) in groups.items()]

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self):
        return iter(self.queries)

    def validate(self, schema: Schema) -> None:
        for q in self.queries:
            q.validate(schema)

    def answers(self, tensor: np.ndarray) -> np.ndarray:
        """Answers of every query against a domain-shaped tensor of counts or weights."""
        out = np.empty(len(self.queries))
        axes = range(tensor.ndim)
        for cols, pos, cells in self._groups:
            other = tuple(a for a in axes if a not in cols)
            out[pos] = tensor.sum(axis=other)[cells]
        return out


@dataclass(frozen=True)
class HistogramDistribution:
    schema: Schema
    weights: np.ndarray

    def __post_init__(self):
        if self.weights.shape != (self.schema.domain_size,):
            raise ValueError("weights must have one entry per domain cell")

    @classmethod
    def uniform(cls, schema: Schema) -> "HistogramDistribution":
        d = schema.domain_size
        return cls(schema, np.full(d, 1.0 / d))

    @property
    def tensor(self) -> np.ndarray:
        return self.weights.reshape(self.schema.cardinalities)


def build_workload(schema: Schema, max_way: int, rng: Randomness, query_cap: int = DEFAULT_QUERY_CAP) -> Workload:
    """All 1-way marginal cells, then whole higher-way marginals over randomly
    ordered column subsets while they fit under ``query_cap``."""
    if not 1 <= max_way <= 3:
        raise WorkloadError(f"max_way must be 1, 2 or 3, got {max_way}")
    k = len(schema.columns)
    cards = schema.cardinalities

    def cells(cols):
        return [MarginalQuery(cols, cell) for cell in itertools.product(*(range(cards[c]) for c in cols))]

    queries = [q for c in range(k) for q in cells((c,))]
    if len(queries) > query_cap:
        raise WorkloadError(f"query cap {query_cap} is below the {len(queries)} mandatory 1-way queries")
    subsets = [s for way in range(2, min(max_way, k) + 1) for s in itertools.combinations(range(k), way)]
    for j in rng.permutation(len(subsets)):
        cols = subsets[j]
        size = math.prod(cards[c] for c in cols)
        if len(queries) + size <= query_cap:
            queries.extend(cells(cols))
    return Workload(queries)


def evaluate_query(q: MarginalQuery, data: Dataset) -> int:
    q.validate(data.schema)
    if len(data) == 0:
        return 0
    match = np.all(data.codes[:, list(q.columns)] == np.asarray(q.cell), axis=1)
    return int(match.sum())


def evaluate_query_on_dist(q: MarginalQuery, dist: HistogramDistribution, n: int) -> float:
    q.validate(dist.schema)
    return float(n * dist.tensor[q.index(len(dist.schema.columns))].sum())


def mwem_fit(
    data: Dataset,
    workload: Workload,
    epsilon: float,
    iterations: int,
    ledger: BudgetLedger,
    rng: Randomness,
    callback: Callable[[int, int, np.ndarray], None] | None = None,
) -> HistogramDistribution:
    """Fit a histogram with ``iterations`` rounds of MWEM.

    Each round spends epsilon/(2T) selecting the worst-answered query and
    epsilon/(2T) measuring it with Laplace noise; the multiplicative-weights
    update uses only that round's measurement.  ``callback(t, selected, weights)``
    is invoked after every update.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not epsilon > 0:
        raise PrivacyError("epsilon must be positive")
    schema = data.schema
    workload.validate(schema)
    n = len(data)
    if n == 0:
        raise ValueError("cannot fit MWEM to an empty dataset")
    sub = ledger.sub("mwem", Budget(epsilon))
    eps_round = epsilon / (2 * iterations)
    ndim = len(schema.columns)

    true_answers = workload.answers(data.histogram().reshape(schema.cardinalities))
    w = np.full(schema.cardinalities, 1.0 / schema.domain_size)
    for t in range(iterations):
        est = n * workload.answers(w)
        i = exponential_select(np.abs(true_answers - est), 1.0, eps_round, rng)
        sub.spend(f"select[{t}]", Budget(eps_round))
        measured = true_answers[i] + laplace_noise(1.0, eps_round, rng)
        sub.spend(f"measure[{t}]", Budget(eps_round))

        w[workload.queries[i].index(ndim)] *= math.exp((measured - est[i]) / (2.0 * n))
        w /= w.sum()
        if not (np.all(w >= 0) and abs(w.sum() - 1.0) <= 1e-9):
            raise FloatingPointError("MWEM weights left the probability simplex")
        if callback is not None:
            callback(t, i, w.ravel().copy())
    return HistogramDistribution(schema, w.ravel().copy())


def sample_synthetic(dist: HistogramDistribution, n_rows: int, rng: Randomness) -> Dataset:
    if n_rows < 1:
        raise ValueError(f"n_rows must be >= 1, got {n_rows}")
    p = dist.weights / dist.weights.sum()
    cells = rng.choice(p.size, size=n_rows, p=p)
    codes = np.stack(np.unravel_index(cells, dist.schema.cardinalities), axis=1)
    return Dataset(dist.schema, codes)


def mwem_synthesize(
    data: Dataset,
    epsilon: float,
    ledger: BudgetLedger,
    rng: Randomness,
    iterations: int = DEFAULT_ITERATIONS,
    max_way: int = DEFAULT_MAX_WAY,
    query_cap: int = DEFAULT_QUERY_CAP,
    n_rows: int | None = None,
) -> Dataset:
    """Workload construction, fit and sampling; emits ``len(data)`` rows by default."""
    workload = build_workload(data.schema, max_way, rng, query_cap)
    dist = mwem_fit(data, workload, epsilon, iterations, ledger, rng)
    return sample_synthetic(dist, n_rows or len(data), rng)
