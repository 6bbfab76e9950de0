"""Discretized tabular data: schema, dataset, ingestion, splitting, group tallies.

A schema spec is a YAML (or JSON) document::

    delimiter: ","
    protected: sex          # binary; first value is the unprivileged group A=0
    label: income           # binary; second value is the positive class Y=1
    columns:
      - {name: sex, type: categorical, values: [Female, Male]}
      - {name: age, type: continuous, edges: [0, 25, 50, 120]}
      - {name: income, type: categorical, values: ["<=50K", ">50K"]}

Continuous values fall into ``[edges[i], edges[i+1])``; the last bin also
includes its upper edge.  Bin labels such as ``[25,50)`` are accepted on input
so decoded (e.g. synthetic) tables load back with the same schema.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import yaml

DOMAIN_CAP = 2 ** 22
MISSING_TOKENS = frozenset({"", "?", "na", "n/a", "nan", "null", "none"})


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


class GroupKey(NamedTuple):
    a: int
    y: int


GROUP_KEYS = (GroupKey(0, 0), GroupKey(0, 1), GroupKey(1, 0), GroupKey(1, 1))


@dataclass(frozen=True)
class Column:
    name: str
    cardinality: int
    values: tuple[str, ...] | None = None
    edges: tuple[float, ...] | None = None

    @property
    def labels(self) -> tuple[str, ...]:
        if self.values is not None:
            return self.values
        if self.edges is not None:
            return tuple(_bin_label(self.edges, i) for i in range(self.cardinality))
        return tuple(str(i) for i in range(self.cardinality))


def _fmt_edge(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _bin_label(edges: Sequence[float], i: int) -> str:
    close = "]" if i == len(edges) - 2 else ")"
    return f"[{_fmt_edge(edges[i])},{_fmt_edge(edges[i + 1])}{close}"


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]
    protected: int | None
    label: int | None
    domain_cap: int = field(default=DOMAIN_CAP, compare=False)

    def __post_init__(self):
        if not self.columns:
            raise SchemaError("schema has no columns")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in {names}")
        for c in self.columns:
            if c.cardinality < 2:
                raise SchemaError(f"column {c.name!r} has cardinality {c.cardinality} < 2")
        for role in ("protected", "label"):
            idx = getattr(self, role)
            if idx is None:
                continue
            if not 0 <= idx < len(self.columns):
                raise SchemaError(f"{role} index {idx} out of range")
            if self.columns[idx].cardinality != 2:
                raise SchemaError(f"{role} column {self.columns[idx].name!r} must be binary")
        if self.protected is not None and self.protected == self.label:
            raise SchemaError("protected attribute and label must be distinct columns")
        if self.domain_size > self.domain_cap:
            raise SchemaError(
                f"domain size {self.domain_size} exceeds the cap {self.domain_cap}; use coarser bins"
            )

    @classmethod
    def simple(cls, cardinalities: Sequence[int], protected: int | None = None, label: int | None = None,
               names: Sequence[str] | None = None) -> "Schema":
        names = names or [f"c{i}" for i in range(len(cardinalities))]
        cols = tuple(Column(n, int(k)) for n, k in zip(names, cardinalities))
        return cls(cols, protected, label)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(c.cardinality for c in self.columns)

    @property
    def domain_size(self) -> int:
        return math.prod(self.cardinalities)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown column {name!r}") from None

    def require_groups(self) -> tuple[int, int]:
        if self.protected is None or self.label is None:
            raise SchemaError("schema needs both a protected attribute and a label")
        return self.protected, self.label

    def drop(self, idx: int) -> "Schema":
        cols = self.columns[:idx] + self.columns[idx + 1:]

        def shift(j):
            if j is None or j == idx:
                return None
            return j - 1 if j > idx else j

        return Schema(cols, shift(self.protected), shift(self.label), self.domain_cap)

    def to_spec(self, delimiter: str = ",") -> dict:
        cols = []
        for c in self.columns:
            if c.edges is not None:
                cols.append({"name": c.name, "type": "continuous", "edges": list(c.edges)})
            else:
                cols.append({"name": c.name, "type": "categorical", "values": list(c.labels)})
        spec = {"delimiter": delimiter, "columns": cols}
        if self.protected is not None:
            spec["protected"] = self.columns[self.protected].name
        if self.label is not None:
            spec["label"] = self.columns[self.label].name
        return spec


class Dataset:
    """Immutable table of integer codes, one row per record."""

    __slots__ = ("schema", "codes")

    def __init__(self, schema: Schema, codes):
        arr = np.array(codes, dtype=np.int64, copy=True)
        k = len(schema.columns)
        if arr.size == 0:
            arr = arr.reshape(0, k)
        if arr.ndim != 2 or arr.shape[1] != k:
            raise DataError(f"rows must have {k} codes, got array of shape {arr.shape}")
        if arr.size:
            card = np.asarray(schema.cardinalities)
            bad = (arr < 0) | (arr >= card)
            if bad.any():
                r, c = np.argwhere(bad)[0]
                raise DataError(f"row {r}, column {schema.columns[c].name!r}: code {arr[r, c]} out of range")
        arr.setflags(write=False)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "codes", arr)

    def __setattr__(self, key, value):
        raise AttributeError("Dataset is immutable")

    def __reduce__(self):
        return (Dataset, (self.schema, self.codes))

    def __len__(self) -> int:
        return self.codes.shape[0]

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, columns={self.schema.names})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self.schema == other.schema and np.array_equal(self.codes, other.codes)

    @property
    def rows(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in r) for r in self.codes]

    def take(self, idx) -> "Dataset":
        return Dataset(self.schema, self.codes[np.asarray(idx, dtype=np.int64)])

    def column(self, idx: int) -> np.ndarray:
        return self.codes[:, idx]

    def drop_column(self, idx: int) -> "Dataset":
        return Dataset(self.schema.drop(idx), np.delete(self.codes, idx, axis=1))

    def flat_index(self) -> np.ndarray:
        """Row-major cell index of every row in the full product domain."""
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.ravel_multi_index(tuple(self.codes.T), self.schema.cardinalities)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.flat_index(), minlength=self.schema.domain_size).astype(float)

    def marginal(self, columns: Sequence[int]) -> np.ndarray:
        """Contingency counts over ``columns`` as an array of shape (card_c for c in columns)."""
        shape = tuple(self.schema.cardinalities[c] for c in columns)
        if len(self) == 0:
            return np.zeros(shape)
        flat = np.ravel_multi_index(tuple(self.codes[:, c] for c in columns), shape)
        return np.bincount(flat, minlength=math.prod(shape)).reshape(shape).astype(float)


# -- schema spec / file I/O --------------------------------------------------


def parse_schema_spec(spec: dict, domain_cap: int = DOMAIN_CAP) -> Schema:
    if not isinstance(spec, dict) or "columns" not in spec:
        raise SchemaError("schema spec must be a mapping with a 'columns' list")
    cols = []
    for i, c in enumerate(spec["columns"]):
        name = c.get("name")
        kind = c.get("type", "categorical")
        if not name:
            raise SchemaError(f"column #{i} has no name")
        if kind == "categorical":
            values = tuple(str(v) for v in c.get("values") or ())
            if len(set(values)) != len(values):
                raise SchemaError(f"column {name!r}: duplicate category values")
            cols.append(Column(name, len(values), values=values))
        elif kind == "continuous":
            edges = tuple(float(e) for e in c.get("edges") or ())
            if len(edges) < 3 or any(b <= a for a, b in zip(edges, edges[1:])):
                raise SchemaError(f"column {name!r}: need >= 3 strictly increasing bin edges")
            cols.append(Column(name, len(edges) - 1, edges=edges))
        else:
            raise SchemaError(f"column {name!r}: unknown type {kind!r}")
    names = [c.name for c in cols]

    def role(key):
        val = spec.get(key)
        if val is None:
            return None
        if val not in names:
            raise SchemaError(f"{key} column {val!r} is not declared")
        return names.index(val)

    return Schema(tuple(cols), role("protected"), role("label"), domain_cap)


def load_schema(path, domain_cap: int = DOMAIN_CAP) -> tuple[Schema, str]:
    """Read a schema spec file; returns the schema and the table delimiter."""
    with open(path) as fh:
        spec = yaml.safe_load(fh)
    return parse_schema_spec(spec, domain_cap), str((spec or {}).get("delimiter", ","))


def _as_number(text: str) -> float | None:
    try:
        return float(text)
    except ValueError:
        return None


def _encode(col: Column, raw: str, row: int) -> int:
    where = f"row {row}, column {col.name!r}"
    if col.values is not None:
        if raw in col.values:
            return col.values.index(raw)
        # numeric category codes written as e.g. "1.0" vs "1"
        x = _as_number(raw)
        if x is not None:
            for i, v in enumerate(col.values):
                if _as_number(v) == x:
                    return i
        raise DataError(f"{where}: unknown value {raw!r} (expected one of {list(col.values)})")
    labels = col.labels
    if raw in labels:
        return labels.index(raw)
    try:
        x = float(raw)
    except ValueError:
        raise DataError(f"{where}: {raw!r} is neither a number nor a bin label") from None
    edges = col.edges
    if not edges[0] <= x <= edges[-1]:
        raise DataError(f"{where}: value {x} outside bin range [{edges[0]}, {edges[-1]}]")
    return min(int(np.searchsorted(edges, x, side="right")) - 1, col.cardinality - 1)


def load_table(path, schema_spec, delimiter: str | None = None, domain_cap: int = DOMAIN_CAP) -> Dataset:
    """Load a delimited table with a header row and encode it per ``schema_spec``.

    ``schema_spec`` is a path to a spec file or an already parsed :class:`Schema`.
    Row numbers in errors are 1-based data rows (the header is row 0).
    """
    if isinstance(schema_spec, Schema):
        schema, spec_delim = schema_spec, ","
    else:
        schema, spec_delim = load_schema(schema_spec, domain_cap)
    delimiter = delimiter or spec_delim
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise DataError(f"{path}: declared column(s) {missing} missing from header")
        positions = [header.index(n) for n in schema.names]
        codes = []
        missing_rows = []
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {r} has {len(rec)} fields, header has {len(header)}")
            vals = [rec[p].strip() for p in positions]
            if any(v.lower() in MISSING_TOKENS for v in vals):
                missing_rows.append(r)
                continue
            codes.append([_encode(c, v, r) for c, v in zip(schema.columns, vals)])
    if missing_rows:
        raise DataError(
            f"{path}: {len(missing_rows)} row(s) contain missing values (first at row {missing_rows[0]}); "
            "imputation is not supported"
        )
    return Dataset(schema, np.asarray(codes, dtype=np.int64).reshape(-1, len(schema.columns)))


def decode_rows(data: Dataset) -> list[list[str]]:
    labels = [c.labels for c in data.schema.columns]
    return [[labels[j][v] for j, v in enumerate(row)] for row in data.codes.tolist()]


def write_table(data: Dataset, path, delimiter: str = ",") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(data.schema.names)
        w.writerows(decode_rows(data))


def write_schema(schema: Schema, path, delimiter: str = ",") -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(schema.to_spec(delimiter), fh, sort_keys=False)


# -- splitting and group accounting -----------------------------------------


@dataclass(frozen=True)
class SplitPair:
    train: Dataset
    test: Dataset
    seed: int


def split_train_test(data: Dataset, test_fraction: float = 0.2, seed: int = 0) -> SplitPair:
    """Uniform (unstratified) random split; ``|test| = round(test_fraction * n)``."""
    n = len(data)
    if n < 2:
        raise DataError(f"need at least 2 rows to split, got {n}")
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return SplitPair(data.take(train_idx), data.take(test_idx), seed)


def group_counts(data: Dataset) -> dict[GroupKey, int]:
    a_col, y_col = data.schema.require_groups()
    flat = data.codes[:, a_col] * 2 + data.codes[:, y_col]
    counts = np.bincount(flat, minlength=4)
    return {k: int(counts[2 * k.a + k.y]) for k in GROUP_KEYS}


def minority_proportion(data: Dataset) -> float:
    n = len(data)
    if n == 0:
        raise DataError("minority proportion of an empty dataset is undefined")
    return min(group_counts(data).values()) / n
