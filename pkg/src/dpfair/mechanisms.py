"""Differential-privacy primitives and a sequential-composition budget ledger.

All randomness is drawn from an injected :class:`numpy.random.Generator`
(PCG64 bit generator), so equal seeds give bit-identical outputs.

Noise can be switched off for deterministic equivalence tests with
:func:`noise_disabled`.  In that mode Laplace/Gaussian noise is exactly zero
and :func:`exponential_select` returns the first maximal index.  Budgets are
still charged, so ledger audits behave identically.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

Randomness = np.random.Generator

DEFAULT_DELTA = 1e-5

_NOISE_OFF: contextvars.ContextVar[bool] = contextvars.ContextVar("dpfair_noise_off", default=False)


class PrivacyError(ValueError):
    """Invalid mechanism parameters."""


class OverspendError(RuntimeError):
    def __init__(self, label: str, requested: "Budget", remaining: "Budget"):
        self.label = label
        self.requested = requested
        self.remaining = remaining
        super().__init__(
            f"overspend on {label!r}: requested (eps={requested.epsilon!r}, delta={requested.delta!r}), "
            f"remaining (eps={remaining.epsilon!r}, delta={remaining.delta!r})"
        )


def make_rng(seed) -> Randomness:
    """Seeded PCG64 generator. Accepts an int or a :class:`numpy.random.SeedSequence`."""
    return np.random.Generator(np.random.PCG64(seed))


@contextlib.contextmanager
def noise_disabled() -> Iterator[None]:
    """Test-only "infinite budget oracle": every mechanism becomes exact."""
    token = _NOISE_OFF.set(True)
    try:
        yield
    finally:
        _NOISE_OFF.reset(token)


def noise_is_disabled() -> bool:
    return _NOISE_OFF.get()


@dataclass(frozen=True)
class Budget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise PrivacyError(f"epsilon must be finite and >= 0, got {self.epsilon!r}")
        if not (0 <= self.delta < 1):
            raise PrivacyError(f"delta must lie in [0, 1), got {self.delta!r}")

    def scaled(self, fraction: float) -> "Budget":
        return Budget(self.epsilon * fraction, self.delta * fraction)


def split_budget(budget: Budget, fractions: Sequence[float]) -> list[Budget]:
    """Split ``budget`` by ``fractions``; the last part absorbs rounding so parts add up."""
    if not fractions or any(f < 0 for f in fractions) or abs(math.fsum(fractions) - 1.0) > 1e-12:
        raise PrivacyError(f"fractions must be non-negative and sum to 1, got {list(fractions)}")
    parts = [budget.scaled(f) for f in fractions[:-1]]
    eps_rest = max(budget.epsilon - math.fsum(p.epsilon for p in parts), 0.0)
    delta_rest = max(budget.delta - math.fsum(p.delta for p in parts), 0.0)
    parts.append(Budget(eps_rest, delta_rest))
    return parts


@dataclass
class LedgerEntry:
    label: str
    budget: Budget
    children: "BudgetLedger | None" = None

    def to_dict(self) -> dict:
        out = {"label": self.label, "epsilon": self.budget.epsilon, "delta": self.budget.delta}
        if self.children is not None:
            out["entries"] = [e.to_dict() for e in self.children.entries]
        return out


@dataclass
class BudgetLedger:
    """Sequential composition: epsilons and deltas of all entries add.

    ``sub`` reserves part of the budget as one aggregate entry and returns a
    child ledger for the spends that make it up, so transcripts are nested.
    """

    total: Budget
    entries: list[LedgerEntry] = field(default_factory=list)

    @property
    def spent(self) -> Budget:
        return Budget(
            math.fsum(e.budget.epsilon for e in self.entries),
            math.fsum(e.budget.delta for e in self.entries),
        )

    @property
    def remaining(self) -> Budget:
        spent = self.spent
        return Budget(max(self.total.epsilon - spent.epsilon, 0.0), max(self.total.delta - spent.delta, 0.0))

    def can_afford(self, amount: Budget) -> bool:
        spent = self.spent
        tol_eps = 1e-12 * max(1.0, self.total.epsilon)
        tol_delta = 1e-12 * max(1e-6, self.total.delta)
        return (
            spent.epsilon + amount.epsilon <= self.total.epsilon + tol_eps
            and spent.delta + amount.delta <= self.total.delta + tol_delta
        )

    def spend(self, label: str, amount: Budget) -> "BudgetLedger":
        if not self.can_afford(amount):
            raise OverspendError(label, amount, self.remaining)
        self.entries.append(LedgerEntry(label, amount))
        return self

    def sub(self, label: str, amount: Budget) -> "BudgetLedger":
        if not self.can_afford(amount):
            raise OverspendError(label, amount, self.remaining)
        child = BudgetLedger(amount)
        self.entries.append(LedgerEntry(label, amount, child))
        return child

    def transcript(self) -> dict:
        spent = self.spent
        return {
            "total": {"epsilon": self.total.epsilon, "delta": self.total.delta},
            "spent": {"epsilon": spent.epsilon, "delta": spent.delta},
            "entries": [e.to_dict() for e in self.entries],
        }


def _check_positive(name: str, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise PrivacyError(f"{name} must be positive and finite, got {value!r}")


def laplace_scale(sensitivity: float, epsilon: float) -> float:
    _check_positive("sensitivity", sensitivity)
    _check_positive("epsilon", epsilon)
    return sensitivity / epsilon


def laplace_noise(sensitivity: float, epsilon: float, rng: Randomness, size=None):
    """Laplace(0, sensitivity/epsilon) sample(s)."""
    b = laplace_scale(sensitivity, epsilon)
    if noise_is_disabled():
        return 0.0 if size is None else np.zeros(size)
    return rng.laplace(0.0, b, size=size)


def gaussian_sigma(sensitivity: float, budget: Budget) -> float:
    """Classic calibration sigma = sensitivity * sqrt(2 ln(1.25/delta)) / epsilon."""
    _check_positive("sensitivity", sensitivity)
    _check_positive("epsilon", budget.epsilon)
    if not 0 < budget.delta < 1:
        raise PrivacyError("the Gaussian mechanism requires 0 < delta < 1")
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / budget.delta)) / budget.epsilon


def gaussian_noise(sigma: float, rng: Randomness, size=None):
    _check_positive("sigma", sigma)
    if noise_is_disabled():
        return 0.0 if size is None else np.zeros(size)
    return rng.normal(0.0, sigma, size=size)


def exponential_probabilities(scores: Sequence[float], sensitivity: float, epsilon: float) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise PrivacyError("scores must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(s)):
        raise PrivacyError("scores must be finite (NaN/inf found)")
    _check_positive("sensitivity", sensitivity)
    _check_positive("epsilon", epsilon)
    logits = epsilon * (s - s.max()) / (2.0 * sensitivity)
    p = np.exp(logits)
    return p / p.sum()


def exponential_select(scores: Sequence[float], sensitivity: float, epsilon: float, rng: Randomness,
                       size: int | None = None):
    """Index i with probability proportional to exp(epsilon * score_i / (2 * sensitivity)).

    With ``size`` given, returns that many independent draws (each one a separate
    use of the mechanism, for Monte-Carlo checks).
    """
    p = exponential_probabilities(scores, sensitivity, epsilon)
    if noise_is_disabled():
        best = int(np.argmax(np.asarray(scores, dtype=float)))
        return best if size is None else np.full(size, best)
    cdf = np.cumsum(p)
    u = rng.random(size) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    return int(idx) if size is None else idx
