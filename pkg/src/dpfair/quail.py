"""QUAIL ensemble: a feature-only synthesizer plus a DP logistic-regression labeler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .classifier import DEFAULT_MAX_ITERS, DEFAULT_TOL, _check_labels, fit_logistic, one_hot, sigmoid
from .mechanisms import Budget, BudgetLedger, Randomness, laplace_noise
from .tabular import DataError, Dataset, Schema

# (data, epsilon, ledger, rng) -> synthetic dataset over the same schema
Synthesizer = Callable[[Dataset, float, BudgetLedger, Randomness], Dataset]

DEFAULT_DP_LAMBDA = 0.01


@dataclass(frozen=True)
class QuailConfig:
    synth_fraction: float = 0.5
    regularization: float = DEFAULT_DP_LAMBDA

    def __post_init__(self):
        if not 0 < self.synth_fraction < 1:
            raise ValueError("synth_fraction must lie in (0, 1)")
        if not self.regularization > 0:
            raise ValueError("regularization must be positive")

    @property
    def classifier_fraction(self) -> float:
        return 1.0 - self.synth_fraction


@dataclass(frozen=True)
class DPClassifier:
    """Weights over full one-hot features plus a trailing intercept weight.

    Rows are encoded as ``[one_hot(x), 1] / sqrt(n_features + 1)`` so every
    encoded row has unit L2 norm, the condition for the output-perturbation
    sensitivity bound.
    """

    schema: Schema
    columns: tuple[int, ...]
    weights: np.ndarray
    epsilon_used: float

    def encode(self, data: Dataset) -> np.ndarray:
        return dp_design_matrix(data, list(self.columns))

    def predict_labels(self, data: Dataset) -> np.ndarray:
        return (sigmoid(self.encode(data) @ self.weights) >= 0.5).astype(np.int64)


def dp_design_matrix(data: Dataset, columns: list[int]) -> np.ndarray:
    X = np.hstack([one_hot(data, columns, drop_first=False), np.ones((len(data), 1))])
    return X / math.sqrt(len(columns) + 1)


def output_sensitivity(n: int, lam: float, dim: int) -> float:
    """L1 sensitivity of the regularized minimizer.

    It moves by at most 2/(n*lam) in L2 when one row is replaced (1-Lipschitz
    loss, unit-norm rows); sqrt(dim) converts that to an L1 bound, which
    calibrates independent per-coordinate Laplace noise.
    """
    return math.sqrt(dim) * 2.0 / (n * lam)


def train_dp_logreg(data: Dataset, epsilon: float, lam: float, ledger: BudgetLedger, rng: Randomness,
                    max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> DPClassifier:
    """epsilon-DP logistic regression by output perturbation."""
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    _, label = data.schema.require_groups()
    cols = [c for c in range(len(data.schema.columns)) if c != label]
    y = data.codes[:, label].astype(float)
    _check_labels(y)
    X = dp_design_matrix(data, cols)
    ledger.spend("dp_logreg", Budget(epsilon))
    fit = fit_logistic(X, y, lam, np.ones(X.shape[1]), max_iters, tol)
    d = X.shape[1]
    w = fit.theta + laplace_noise(output_sensitivity(len(data), lam, d), epsilon, rng, size=d)
    return DPClassifier(data.schema, tuple(cols), w, epsilon)


def quail_synthesize(data: Dataset, base_synth: Synthesizer, epsilon: float, config: QuailConfig,
                     ledger: BudgetLedger, rng: Randomness) -> Dataset:
    """Train a DP labeler on the full data, synthesize the label-free table with the
    rest of the budget, then attach the labeler's hard predictions."""
    _, label = data.schema.require_groups()
    sub = ledger.sub("quail", Budget(epsilon))
    eps_clf = epsilon * config.classifier_fraction
    eps_syn = epsilon - eps_clf
    clf = train_dp_logreg(data, eps_clf, config.regularization, sub.sub("classifier", Budget(eps_clf)), rng)
    features = data.drop_column(label)
    synth = base_synth(features, eps_syn, sub.sub("synthesizer", Budget(eps_syn)), rng)
    if synth.schema != features.schema:
        raise DataError("base synthesizer returned a dataset with a different schema")
    placeholder = np.insert(synth.codes, label, 0, axis=1)
    y_hat = clf.predict_labels(Dataset(data.schema, placeholder))
    placeholder[:, label] = y_hat
    return Dataset(data.schema, placeholder)
