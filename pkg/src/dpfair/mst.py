"""Tree-structured marginal synthesizer in the style of MST.

Pipeline: Gaussian-noised 1-way marginals, a privately selected spanning tree
over column pairs (exponential mechanism), Gaussian-noised
2-way marginals on the tree edges, calibration of the edge tables to the node
marginals, and ancestral sampling.

This is a deliberate simplification of Private-PGM: the graphical model is
restricted to a tree, so inference is exact and closed-form.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mechanisms import (
    Budget,
    BudgetLedger,
    Randomness,
    exponential_select,
    gaussian_noise,
    gaussian_sigma,
    split_budget,
)
from .tabular import Dataset, Schema

PHASE_FRACTIONS = (1 / 3, 1 / 3, 1 / 3)
IPF_TOL = 1e-6
IPF_MAX_SWEEPS = 500
CALIBRATION_FLOORS = (1e-3, 1e-2, 1e-1, 1.0)
# replace-one: one row moves one unit of count between two cells
COUNT_L2_SENSITIVITY = math.sqrt(2.0)


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoisyMarginal:
    columns: tuple[int, ...]
    counts: np.ndarray
    sigma: float

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def mi_sensitivity(n: int) -> float:
    """Replace-one sensitivity bound of empirical mutual information (nats)."""
    n = max(n, 2)
    return 2.0 / n * math.log(n) + 1.0 / n


def mutual_information(table: np.ndarray) -> float:
    """Mutual information (nats) of the empirical joint in a 2-d count table."""
    total = table.sum()
    if total <= 0:
        return 0.0
    p = table / total
    pu = p.sum(axis=1, keepdims=True)
    pv = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pu @ pv)[nz])))


def project_counts(counts: np.ndarray, n: float) -> np.ndarray:
    """Clip negatives to zero and rescale to total ``n`` (uniform if nothing survives)."""
    out = np.clip(counts, 0.0, None)
    s = out.sum()
    if s <= 0:
        return np.full_like(out, n / out.size, dtype=float)
    return out * (n / s)


def measure_marginals(
    data: Dataset,
    column_sets: Sequence[Sequence[int]],
    budget: Budget,
    ledger: BudgetLedger,
    rng: Randomness,
    label: str = "gaussian",
) -> list[NoisyMarginal]:
    """Measure several marginals as one Gaussian mechanism.

    The concatenated count vector of ``m`` marginals has L2 sensitivity
    sqrt(2m), which is cheaper than composing ``m`` separate measurements.
    """
    for cols in column_sets:
        if not 1 <= len(cols) <= 2:
            raise ValueError(f"only 1- and 2-way marginals are supported, got columns {tuple(cols)}")
    sigma = gaussian_sigma(COUNT_L2_SENSITIVITY * math.sqrt(len(column_sets)), budget)
    ledger.spend(label, budget)
    n = len(data)
    out = []
    for cols in column_sets:
        exact = data.marginal(cols)
        noisy = exact + gaussian_noise(sigma, rng, size=exact.shape)
        out.append(NoisyMarginal(tuple(cols), project_counts(noisy, n), sigma))
    return out


def measure_marginal(data: Dataset, columns: Sequence[int], budget: Budget, ledger: BudgetLedger,
                     rng: Randomness) -> NoisyMarginal:
    return measure_marginals(data, [columns], budget, ledger, rng, label=f"marginal{tuple(columns)}")[0]


def independence_gap(data: Dataset, u: int, v: int, nodes: Sequence[NoisyMarginal]) -> float:
    """L1 distance between the true (u, v) counts and the product of the released
    noisy 1-way marginals.  Replacing one row moves the true table by at most 2."""
    n = len(data)
    est = np.outer(nodes[u].counts, nodes[v].counts) / max(n, 1)
    return float(np.abs(data.marginal((u, v)) - est).sum())


def select_tree(data: Dataset, budget: Budget, ledger: BudgetLedger, rng: Randomness, score: str = "mi",
                nodes: Sequence[NoisyMarginal] | None = None) -> list[tuple[int, int]]:
    """Kruskal-style private spanning tree.

    Each of the k-1 steps draws one edge among pairs joining two different
    components, spending budget/(k-1).  ``score="mi"`` ranks pairs by empirical
    mutual information (sensitivity :func:`mi_sensitivity`); ``score="l1"``
    ranks them by :func:`independence_gap` against the noisy node marginals
    ``nodes`` (sensitivity 2).
    """
    k = len(data.schema.columns)
    if k < 2:
        raise ValueError("tree selection needs at least 2 columns")
    pairs = [(u, v) for u in range(k) for v in range(u + 1, k)]
    if score == "mi":
        sens = mi_sensitivity(len(data))
        scores = {(u, v): mutual_information(data.marginal((u, v))) for u, v in pairs}
    elif score == "l1":
        if nodes is None:
            raise ValueError("score='l1' needs the released node marginals")
        sens = 2.0
        scores = {(u, v): independence_gap(data, u, v, nodes) for u, v in pairs}
    else:
        raise ValueError(f"unknown score {score!r}")
    step = Budget(budget.epsilon / (k - 1), budget.delta / (k - 1))

    comp = list(range(k))

    def find(x):
        while comp[x] != x:
            comp[x] = comp[comp[x]]
            x = comp[x]
        return x

    edges = []
    for t in range(k - 1):
        cand = [e for e in pairs if find(e[0]) != find(e[1])]
        if len(cand) == 1:
            pick = 0
        else:
            pick = exponential_select([scores[e] for e in cand], sens, step.epsilon, rng)
        ledger.spend(f"edge[{t}]", step)
        u, v = cand[pick]
        comp[find(u)] = find(v)
        edges.append((u, v))
    return edges


def _ipf(table: np.ndarray, row: np.ndarray, col: np.ndarray, tol: float, max_sweeps: int):
    t = table.astype(float).copy()
    for sweep in range(max_sweeps + 1):
        resid = max(np.abs(t.sum(axis=1) - row).max(), np.abs(t.sum(axis=0) - col).max())
        if resid < tol:
            return t, resid, sweep
        if sweep == max_sweeps:
            break
        rs = t.sum(axis=1)
        t *= np.divide(row, rs, out=np.zeros_like(row), where=rs > 0)[:, None]
        cs = t.sum(axis=0)
        t *= np.divide(col, cs, out=np.zeros_like(col), where=cs > 0)[None, :]
    return t, resid, max_sweeps


def calibrate_edge(table: np.ndarray, row: np.ndarray, col: np.ndarray,
                   tol: float = IPF_TOL, max_sweeps: int = IPF_MAX_SWEEPS) -> np.ndarray:
    """Rescale a 2-way table until its projections match ``row`` and ``col``."""
    n = row.sum()
    t = table.astype(float).copy()
    indep = np.outer(row, col) / n if n > 0 else np.zeros_like(t)
    # rows/columns with no mass can never be scaled up; seed them from independence
    empty_r = (t.sum(axis=1) <= 0) & (row > 0)
    t[empty_r] = indep[empty_r]
    empty_c = (t.sum(axis=0) <= 0) & (col > 0)
    t[:, empty_c] = indep[:, empty_c]
    out, resid, _ = _ipf(t, row, col, tol, max_sweeps)
    if resid < tol:
        return out
    # supports incompatible with the margins: an independent floor restores feasibility,
    # and a larger floor buys faster convergence when a tiny one stalls
    for floor in CALIBRATION_FLOORS:
        out, resid, _ = _ipf(t + floor * indep, row, col, tol, max_sweeps)
        if resid < tol:
            return out
    raise CalibrationError(f"edge calibration did not converge in {max_sweeps} sweeps (residual {resid:.3g})")


@dataclass(frozen=True)
class TreeModel:
    schema: Schema
    edges: tuple[tuple[int, int], ...]
    node_marginals: tuple[NoisyMarginal, ...]
    edge_marginals: tuple[NoisyMarginal, ...]

    def edge_table(self, u: int, v: int) -> np.ndarray:
        """Calibrated counts with ``u`` on axis 0 and ``v`` on axis 1."""
        for (a, b), m in zip(self.edges, self.edge_marginals):
            if (a, b) == (u, v):
                return m.counts
            if (a, b) == (v, u):
                return m.counts.T
        raise KeyError((u, v))


def fit_tree(schema: Schema, node_marginals: Sequence[NoisyMarginal], edge_marginals: Sequence[NoisyMarginal],
             edges: Sequence[tuple[int, int]]) -> TreeModel:
    k = len(schema.columns)
    if len(node_marginals) != k or len(edge_marginals) != len(edges):
        raise ValueError("need one node marginal per column and one edge marginal per edge")
    comp = list(range(k))

    def find(x):
        while comp[x] != x:
            x = comp[x]
        return x

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru == rv:
            raise ValueError(f"edges {list(edges)} contain a cycle")
        comp[ru] = rv

    totals = [m.total for m in node_marginals]
    n = float(np.mean(totals)) if totals else 0.0
    nodes = tuple(
        NoisyMarginal(m.columns, project_counts(m.counts, n), m.sigma) for m in node_marginals
    )
    calibrated = []
    for (u, v), m in zip(edges, edge_marginals):
        table = m.counts if m.columns == (u, v) else m.counts.T
        fitted = calibrate_edge(project_counts(table, n), nodes[u].counts, nodes[v].counts)
        calibrated.append(NoisyMarginal((u, v), fitted, m.sigma))
    return TreeModel(schema, tuple((int(u), int(v)) for u, v in edges), nodes, tuple(calibrated))


def sample_tree(model: TreeModel, n_rows: int, rng: Randomness) -> Dataset:
    """Ancestral sampling; each component is rooted at its lowest column index."""
    if n_rows < 1:
        raise ValueError(f"n_rows must be >= 1, got {n_rows}")
    k = len(model.schema.columns)
    adj: dict[int, list[int]] = {c: [] for c in range(k)}
    for u, v in model.edges:
        adj[u].append(v)
        adj[v].append(u)
    codes = np.zeros((n_rows, k), dtype=np.int64)
    seen = [False] * k
    for root in range(k):
        if seen[root]:
            continue
        seen[root] = True
        p = model.node_marginals[root].counts
        codes[:, root] = rng.choice(p.size, size=n_rows, p=p / p.sum())
        queue = deque([root])
        while queue:
            parent = queue.popleft()
            for child in sorted(adj[parent]):
                if seen[child]:
                    continue
                seen[child] = True
                table = model.edge_table(parent, child)
                fallback = model.node_marginals[child].counts
                for pv in range(table.shape[0]):
                    rows = np.flatnonzero(codes[:, parent] == pv)
                    if rows.size == 0:
                        continue
                    cond = table[pv]
                    if cond.sum() <= 0:
                        cond = fallback
                    codes[rows, child] = rng.choice(cond.size, size=rows.size, p=cond / cond.sum())
                queue.append(child)
    return Dataset(model.schema, codes)


def mst_fit(
    data: Dataset,
    epsilon: float,
    delta: float,
    ledger: BudgetLedger,
    rng: Randomness,
    phase_fractions: Sequence[float] = PHASE_FRACTIONS,
    selection_score: str = "l1",
) -> TreeModel:
    """Spend (epsilon, delta) across node measurement, tree selection and edge
    measurement (epsilon by ``phase_fractions``; delta split between the two
    Gaussian phases) and return the calibrated tree model."""
    k = len(data.schema.columns)
    if k < 2:
        raise ValueError("MST needs at least 2 columns")
    total = Budget(epsilon, delta)
    sub = ledger.sub("mst", total)
    eps_nodes, eps_select, eps_edges = split_budget(Budget(epsilon), phase_fractions)
    delta_nodes, delta_edges = split_budget(Budget(0.0, delta), (0.5, 0.5))
    b_nodes = Budget(eps_nodes.epsilon, delta_nodes.delta)
    b_select = Budget(eps_select.epsilon, 0.0)
    b_edges = Budget(eps_edges.epsilon, delta_edges.delta)

    nodes = measure_marginals(data, [(c,) for c in range(k)], b_nodes, sub.sub("nodes", b_nodes), rng)
    edges = select_tree(data, b_select, sub.sub("select", b_select), rng, selection_score, nodes)
    edge_ms = measure_marginals(data, edges, b_edges, sub.sub("edges", b_edges), rng)
    return fit_tree(data.schema, nodes, edge_ms, edges)


def mst_synthesize(
    data: Dataset,
    epsilon: float,
    delta: float,
    ledger: BudgetLedger,
    rng: Randomness,
    n_rows: int | None = None,
    phase_fractions: Sequence[float] = PHASE_FRACTIONS,
    selection_score: str = "l1",
) -> Dataset:
    """:func:`mst_fit` followed by sampling ``len(data)`` rows by default."""
    model = mst_fit(data, epsilon, delta, ledger, rng, phase_fractions, selection_score)
    return sample_tree(model, n_rows or len(data), rng)
