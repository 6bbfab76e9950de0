"""Synthetic planted-bias tables for tests and desk-scale replication runs."""

from __future__ import annotations

import numpy as np

from .tabular import Column, Dataset, Schema

# (a, y) group shares; (0, 1) is the planted minority at 8%
PLANTED_GROUP_SHARES = {(0, 0): 0.37, (0, 1): 0.08, (1, 0): 0.30, (1, 1): 0.25}

# conditional feature distributions, keyed by what each feature depends on
_EDUCATION = {0: [0.40, 0.32, 0.20, 0.08], 1: [0.08, 0.20, 0.32, 0.40]}  # by y
_OCCUPATION = {  # by (a, y); mostly driven by y
    (0, 0): [0.45, 0.30, 0.17, 0.08],
    (0, 1): [0.10, 0.20, 0.32, 0.38],
    (1, 0): [0.38, 0.32, 0.20, 0.10],
    (1, 1): [0.07, 0.18, 0.35, 0.40],
}
_HOURS = {0: [0.40, 0.40, 0.20], 1: [0.20, 0.45, 0.35]}  # by a
_AGE = {0: [0.35, 0.30, 0.20, 0.15], 1: [0.10, 0.25, 0.35, 0.30]}  # by y


def planted_bias_schema() -> Schema:
    cols = (
        Column("sex", 2, values=("Female", "Male")),
        Column("age", 4, edges=(17.0, 25.0, 35.0, 50.0, 90.0)),
        Column("education", 4, values=("HS", "Some-college", "Bachelors", "Graduate")),
        Column("occupation", 4, values=("Service", "Clerical", "Technical", "Professional")),
        Column("hours", 3, values=("Part-time", "Full-time", "Overtime")),
        Column("income", 2, values=("<=50K", ">50K")),
    )
    return Schema(cols, protected=0, label=5)


def planted_bias_dataset(n: int = 5000, seed: int = 0, shares: dict | None = None) -> Dataset:
    """Table whose (sex, income) groups have exactly the planted shares (up to
    rounding), with features that depend on income, sex, or both."""
    shares = shares or PLANTED_GROUP_SHARES
    rng = np.random.Generator(np.random.PCG64(seed))
    keys = sorted(shares)
    counts = [int(round(shares[k] * n)) for k in keys]
    counts[-1] = n - sum(counts[:-1])
    groups = np.repeat(np.arange(len(keys)), counts)
    rng.shuffle(groups)
    a = np.array([keys[g][0] for g in groups])
    y = np.array([keys[g][1] for g in groups])

    def draw(table, key_of):
        out = np.empty(n, dtype=np.int64)
        for key, probs in table.items():
            rows = np.flatnonzero(key_of == key) if not isinstance(key, tuple) else np.flatnonzero(
                (a == key[0]) & (y == key[1]))
            out[rows] = rng.choice(len(probs), size=rows.size, p=probs)
        return out

    education = draw(_EDUCATION, y)
    occupation = draw(_OCCUPATION, None)
    hours = draw(_HOURS, a)
    age = draw(_AGE, y)
    codes = np.stack([a, age, education, occupation, hours, y], axis=1)
    return Dataset(planted_bias_schema(), codes)
