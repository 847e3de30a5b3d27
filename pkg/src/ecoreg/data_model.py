"""Core domain types shared by every other module.

Records are the row-wise view of survey microdata; :class:`Microdata` is the
columnar view the numerical code works on.  Both are immutable after
construction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import SchemaError, ValidationError

__all__ = [
    "VariableSpec",
    "Schema",
    "Record",
    "OutcomeCounts",
    "RowKind",
    "RegionRow",
    "RegionTable",
    "Violation",
    "Microdata",
    "validate",
]

Value = Union[float, str]


@dataclass(frozen=True)
class VariableSpec:
    """One declared variable.

    ``levels`` and ``reference`` are set for categorical variables only.
    """

    name: str
    kind: str = "real"
    levels: tuple[str, ...] = ()
    reference: str | None = None

    def __post_init__(self):
        if self.kind not in ("real", "categorical"):
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
            if len(self.levels) < 2:
                raise SchemaError(f"{self.name}: categorical needs >= 2 levels")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"{self.name}: duplicate levels")
            if self.reference is None:
                object.__setattr__(self, "reference", self.levels[0])
            if self.reference not in self.levels:
                raise SchemaError(f"{self.name}: reference {self.reference!r} not in levels")
        elif self.levels or self.reference is not None:
            raise SchemaError(f"{self.name}: real variables take no levels")

    @classmethod
    def real(cls, name):
        return cls(name, "real")

    @classmethod
    def categorical(cls, name, levels, reference=None):
        return cls(name, "categorical", tuple(levels), reference)

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    @property
    def non_reference_levels(self) -> tuple[str, ...]:
        return tuple(lv for lv in self.levels if lv != self.reference)

    def to_dict(self) -> dict:
        if self.is_categorical:
            return {"name": self.name, "kind": "categorical",
                    "levels": list(self.levels), "reference": self.reference}
        return {"name": self.name, "kind": "real"}

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariableSpec":
        return cls(d["name"], d.get("kind", "real"), tuple(d.get("levels", ())),
                   d.get("reference"))


@dataclass(frozen=True)
class Schema:
    variables: tuple[VariableSpec, ...]
    interactions: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "interactions",
                           tuple((str(p), str(q)) for p, q in self.interactions))
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise SchemaError("variable names must be unique")
        for name in names:
            if name in ("region_id", "weight"):
                raise SchemaError(f"{name!r} is a reserved column name")
        seen = set()
        for p, q in self.interactions:
            if p == q:
                raise SchemaError(f"interaction ({p}, {q}) needs two distinct variables")
            for v in (p, q):
                if v not in names:
                    raise SchemaError(f"interaction references undeclared variable {v!r}")
            key = frozenset((p, q))
            if key in seen:
                raise SchemaError(f"duplicate interaction ({p}, {q})")
            seen.add(key)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    def __getitem__(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def __contains__(self, name) -> bool:
        return any(v.name == name for v in self.variables)

    def to_dict(self) -> dict:
        return {"variables": [v.to_dict() for v in self.variables],
                "interactions": [list(pq) for pq in self.interactions]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        return cls(tuple(VariableSpec.from_dict(v) for v in d["variables"]),
                   tuple(tuple(pq) for pq in d.get("interactions", ())))


@dataclass(frozen=True)
class Record:
    """One weighted survey respondent."""

    region_id: str
    weight: float
    values: Mapping[str, Value]


@dataclass(frozen=True)
class OutcomeCounts:
    """Counts of [candidate A, candidate B, other or non-vote].

    Counts are reals because exit-poll augmentation rows carry fractional
    pseudo-counts.
    """

    counts: tuple[float, float, float]

    def __post_init__(self):
        c = tuple(float(x) for x in self.counts)
        if len(c) != 3:
            raise ValidationError("outcome counts need exactly 3 entries")
        if not all(math.isfinite(x) and x >= 0 for x in c):
            raise ValidationError(f"outcome counts must be finite and >= 0: {c}")
        if sum(c) <= 0:
            raise ValidationError("outcome total must be positive")
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> float:
        return math.fsum(self.counts)

    def as_array(self) -> np.ndarray:
        return np.array(self.counts)


class RowKind(str, enum.Enum):
    TRUE_OUTCOME = "TrueOutcome"
    EXIT_POLL = "ExitPollSubgroup"


@dataclass(frozen=True)
class RegionRow:
    row_id: str
    region_id: str
    kind: RowKind
    outcome: OutcomeCounts


@dataclass(frozen=True)
class RegionTable:
    rows: tuple[RegionRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        ids = [r.row_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ValidationError("row ids must be unique")

    def __len__(self):
        return len(self.rows)

    @property
    def row_ids(self) -> list[str]:
        return [r.row_id for r in self.rows]

    def counts(self) -> np.ndarray:
        return np.array([r.outcome.counts for r in self.rows], dtype=float).reshape(-1, 3)

    def kinds(self) -> list[RowKind]:
        return [r.kind for r in self.rows]

    def extend(self, rows: Sequence[RegionRow]) -> "RegionTable":
        return RegionTable(self.rows + tuple(rows))

    @classmethod
    def from_counts(cls, region_ids, counts, kind=RowKind.TRUE_OUTCOME):
        return cls(tuple(RegionRow(str(r), str(r), kind, OutcomeCounts(tuple(c)))
                         for r, c in zip(region_ids, np.asarray(counts, dtype=float))))


@dataclass(frozen=True)
class Violation:
    index: int
    kind: str  # unknown_variable | missing_variable | unknown_level | bad_value | bad_weight
    variable: str | None
    detail: str


def validate(schema: Schema, records: Sequence[Record]) -> list[Violation]:
    """Check records against the schema.

    Returns one :class:`Violation` per problem, in record order.  An empty
    list means every record is schema-conformant.
    """
    out = []
    declared = {v.name: v for v in schema.variables}
    for i, rec in enumerate(records):
        w = rec.weight
        if not isinstance(w, (int, float, np.floating, np.integer)) or not math.isfinite(w) or w <= 0:
            out.append(Violation(i, "bad_weight", None, f"weight {w!r} is not positive and finite"))
        for name in rec.values:
            if name not in declared:
                out.append(Violation(i, "unknown_variable", name, f"undeclared variable {name!r}"))
        for name, spec in declared.items():
            if name not in rec.values:
                out.append(Violation(i, "missing_variable", name, f"missing value for {name!r}"))
                continue
            val = rec.values[name]
            if spec.is_categorical:
                if str(val) not in spec.levels:
                    out.append(Violation(i, "unknown_level", name, f"level {val!r} not declared"))
            else:
                try:
                    x = float(val)
                except (TypeError, ValueError):
                    out.append(Violation(i, "bad_value", name, f"non-numeric value {val!r}"))
                    continue
                if not math.isfinite(x):
                    out.append(Violation(i, "bad_value", name, f"non-finite value {val!r}"))
    return out


@dataclass(frozen=True, eq=False)
class Microdata:
    """Columnar microdata.

    ``columns`` maps each real variable to a float array and each categorical
    variable to an int array of codes into ``schema[name].levels``.
    """

    schema: Schema
    region_ids: np.ndarray
    weights: np.ndarray
    columns: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        region_ids = np.asarray(self.region_ids).astype(str)
        weights = np.asarray(self.weights, dtype=float)
        n = len(region_ids)
        if weights.shape != (n,):
            raise ValidationError("weights must be a vector matching region_ids")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ValidationError("weights must be positive and finite")
        cols = {}
        for spec in self.schema.variables:
            if spec.name not in self.columns:
                raise ValidationError(f"missing column {spec.name!r}")
            col = np.asarray(self.columns[spec.name])
            if col.shape != (n,):
                raise ValidationError(f"column {spec.name!r} has wrong length")
            if spec.is_categorical:
                col = col.astype(np.int64)
                if n and (col.min() < 0 or col.max() >= len(spec.levels)):
                    raise ValidationError(f"column {spec.name!r} has out-of-range codes")
            else:
                col = col.astype(float)
                if not np.all(np.isfinite(col)):
                    raise ValidationError(f"column {spec.name!r} has non-finite values")
            col.setflags(write=False)
            cols[spec.name] = col
        extra = set(self.columns) - set(cols)
        if extra:
            raise ValidationError(f"undeclared columns {sorted(extra)}")
        region_ids.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "region_ids", region_ids)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "columns", cols)

    def __len__(self):
        return len(self.weights)

    @classmethod
    def from_records(cls, schema: Schema, records: Sequence[Record]) -> "Microdata":
        problems = validate(schema, records)
        if problems:
            v = problems[0]
            raise ValidationError(f"record {v.index}: {v.detail} ({len(problems)} violations)")
        cols = {}
        for spec in schema.variables:
            if spec.is_categorical:
                index = {lv: k for k, lv in enumerate(spec.levels)}
                cols[spec.name] = np.array([index[str(r.values[spec.name])] for r in records],
                                           dtype=np.int64)
            else:
                cols[spec.name] = np.array([float(r.values[spec.name]) for r in records])
        return cls(schema, np.array([r.region_id for r in records], dtype=str),
                   np.array([r.weight for r in records], dtype=float), cols)

    def to_records(self) -> list[Record]:
        out = []
        for i in range(len(self)):
            vals = {}
            for spec in self.schema.variables:
                c = self.columns[spec.name][i]
                vals[spec.name] = spec.levels[c] if spec.is_categorical else float(c)
            out.append(Record(str(self.region_ids[i]), float(self.weights[i]), vals))
        return out

    def take(self, index) -> "Microdata":
        """Row subset by boolean mask or integer index (order preserved)."""
        index = np.asarray(index)
        if index.dtype.kind not in "biu":
            index = index.astype(np.int64)
        return Microdata(self.schema, self.region_ids[index], self.weights[index],
                         {k: v[index] for k, v in self.columns.items()})

    def with_weights(self, weights) -> "Microdata":
        return Microdata(self.schema, self.region_ids, weights, self.columns)

    def regions(self) -> list[str]:
        """Distinct region ids, sorted."""
        return sorted(set(self.region_ids.tolist()))

    def region_index(self) -> dict[str, np.ndarray]:
        """Map region id to its row indices, each in file order."""
        order = np.argsort(self.region_ids, kind="stable")
        ids = self.region_ids[order]
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]]) if len(ids) else np.array([], int)
        ends = np.r_[starts[1:], len(ids)]
        return {str(ids[s]): order[s:e] for s, e in zip(starts, ends)}

    @staticmethod
    def concat(parts: Sequence["Microdata"]) -> "Microdata":
        if not parts:
            raise ValueError("nothing to concatenate")
        schema = parts[0].schema
        return Microdata(
            schema,
            np.concatenate([p.region_ids for p in parts]),
            np.concatenate([p.weights for p in parts]),
            {s.name: np.concatenate([p.columns[s.name] for p in parts]) for s in schema.variables},
        )
