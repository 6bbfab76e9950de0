"""L2-regularized logistic regression on one-hot encoded categorical features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tabular import DataError, Dataset, Schema

DEFAULT_LAMBDA = 1e-3
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-10


class SingleClassError(DataError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def logistic_objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float, penalty: np.ndarray) -> float:
    """Mean logistic loss + (lam/2) * ||penalty * theta||^2."""
    z = X @ theta
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * np.sum(penalty * theta ** 2))


def logistic_gradient(theta: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float, penalty: np.ndarray) -> np.ndarray:
    return X.T @ (sigmoid(X @ theta) - y) / X.shape[0] + lam * penalty * theta


@dataclass
class FitResult:
    theta: np.ndarray
    iterations: int
    objective: float
    converged: bool
    history: list[float] = field(default_factory=list)


def fit_logistic(X: np.ndarray, y: np.ndarray, lam: float, penalty: np.ndarray,
                 max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> FitResult:
    """Damped Newton from zero; a step is accepted only if it passes the Armijo test,
    so the recorded objective history is non-increasing."""
    n, d = X.shape
    theta = np.zeros(d)
    f = logistic_objective(theta, X, y, lam, penalty)
    history = [f]
    for it in range(max_iters):
        g = logistic_gradient(theta, X, y, lam, penalty)
        if np.linalg.norm(g) < tol:
            return FitResult(theta, it, f, True, history)
        p = sigmoid(X @ theta)
        H = (X.T * (p * (1.0 - p))) @ X / n + np.diag(lam * penalty) + 1e-12 * np.eye(d)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t, slope = 1.0, float(g @ step)
        for _ in range(60):
            cand = theta - t * step
            f_new = logistic_objective(cand, X, y, lam, penalty)
            if f_new <= f - 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no decrease representable in floating point: at the optimum
            return FitResult(theta, it, f, bool(np.linalg.norm(g) < 1e-6), history)
        assert f_new <= f, "objective increased on an accepted step"
        theta, f = cand, f_new
        history.append(f)
    g = logistic_gradient(theta, X, y, lam, penalty)
    return FitResult(theta, max_iters, f, bool(np.linalg.norm(g) < tol), history)


def one_hot(data: Dataset, columns: list[int], drop_first: bool) -> np.ndarray:
    blocks = []
    for c in columns:
        card = data.schema.cardinalities[c]
        block = np.zeros((len(data), card))
        block[np.arange(len(data)), data.codes[:, c]] = 1.0
        blocks.append(block[:, 1:] if drop_first else block)
    if not blocks:
        return np.zeros((len(data), 0))
    return np.hstack(blocks)


def feature_columns(schema: Schema, include_protected: bool = True) -> list[int]:
    _, label = schema.require_groups()
    cols = [c for c in range(len(schema.columns)) if c != label]
    if not include_protected:
        cols.remove(schema.protected)
    return cols


def _check_labels(y: np.ndarray) -> None:
    if y.size == 0 or np.all(y == y[0]):
        raise SingleClassError("training labels contain a single class (or no rows)")


@dataclass(frozen=True)
class LogRegModel:
    schema: Schema
    columns: tuple[int, ...]
    weights: np.ndarray
    intercept: float
    lam: float
    means: np.ndarray
    scales: np.ndarray
    iterations: int
    objective: float
    converged: bool

    def decision(self, data: Dataset) -> np.ndarray:
        check_compatible(self.schema, data.schema)
        X = (one_hot(data, list(self.columns), drop_first=True) - self.means) / self.scales
        return X @ self.weights + self.intercept

    def predict_proba(self, data: Dataset) -> np.ndarray:
        return sigmoid(self.decision(data))

    def predict_labels(self, data: Dataset) -> np.ndarray:
        # ties at exactly 0.5 go to the positive class
        return (self.predict_proba(data) >= 0.5).astype(np.int64)


def check_compatible(expected: Schema, got: Schema) -> None:
    if expected.names != got.names or expected.cardinalities != got.cardinalities:
        raise DataError(f"schema mismatch: model expects {list(zip(expected.names, expected.cardinalities))}")


def train_logreg(train: Dataset, lam: float = DEFAULT_LAMBDA, max_iters: int = DEFAULT_MAX_ITERS,
                 tol: float = DEFAULT_TOL, include_protected: bool = True) -> LogRegModel:
    """Fit on standardized drop-first one-hot features; the intercept is unpenalized."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    schema = train.schema
    _, label = schema.require_groups()
    cols = feature_columns(schema, include_protected)
    assert label not in cols, "label leaked into the feature set"
    y = train.codes[:, label].astype(float)
    _check_labels(y)
    raw = one_hot(train, cols, drop_first=True)
    means = raw.mean(axis=0)
    scales = raw.std(axis=0)
    scales[scales == 0] = 1.0
    X = np.hstack([(raw - means) / scales, np.ones((len(train), 1))])
    penalty = np.ones(X.shape[1])
    penalty[-1] = 0.0
    fit = fit_logistic(X, y, lam, penalty, max_iters, tol)
    return LogRegModel(schema, tuple(cols), fit.theta[:-1].copy(), float(fit.theta[-1]), lam, means, scales,
                       fit.iterations, fit.objective, fit.converged)


@dataclass(frozen=True)
class PredictionSet:
    y_pred: np.ndarray
    y_true: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        if not (len(self.y_pred) == len(self.y_true) == len(self.group)):
            raise ValueError("prediction arrays must have equal lengths")

    def __len__(self) -> int:
        return len(self.y_pred)


def predict(model: LogRegModel, test: Dataset) -> PredictionSet:
    a, label = test.schema.require_groups()
    y_hat = model.predict_labels(test)
    return PredictionSet(y_hat, test.codes[:, label].copy(), test.codes[:, a].copy())
