"""Ecological inference for subgroups.

A subgroup's embedding in a region is the mean embedding of the region's
records matching a predicate.  The global fit turns it into outcome
probabilities, and multiplying by the subgroup's weight total gives expected
counts.  Tables aggregate expected counts (never shares) across regions.
"""

from __future__ import annotations

import csv
import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data_model import Microdata, RowKind, Schema
from .errors import SchemaError
from .featurizer import Featurizer
from .solver import DesignProblem, ModelFit, softmax

__all__ = [
    "LevelClause",
    "RangeClause",
    "SubgroupQuery",
    "subgroup_embedding",
    "predict_subgroup",
    "SubgroupEstimates",
    "estimate_subgroups",
    "ExitPollRow",
    "exit_poll_table",
    "two_party",
    "GenderGap",
    "gender_gap",
    "ScatterPoint",
    "fit_scatter",
    "scatter_r2",
    "EXIT_POLL_HEADER",
    "write_exit_poll_csv",
    "write_gender_gap_csv",
    "write_scatter_csv",
    "write_sidecar",
]

EXIT_POLL_HEADER = ["group", "share_A", "share_B", "frac_electorate", "participation",
                    "other_nonvoting", "level", "unit_id"]
LEVELS = ("national", "per-state", "per-region")
LOW_SUPPORT_FLOOR = 10.0


@dataclass(frozen=True)
class LevelClause:
    variable: str
    levels: tuple[str, ...]

    def mask(self, data: Microdata) -> np.ndarray:
        spec = data.schema[self.variable]
        codes = [spec.levels.index(lv) for lv in self.levels]
        return np.isin(data.columns[self.variable], codes)

    def __str__(self):
        if len(self.levels) == 1:
            return f"{self.variable}={self.levels[0]}"
        return f"{self.variable} in {{{'|'.join(self.levels)}}}"


@dataclass(frozen=True)
class RangeClause:
    """Closed interval on the raw (unstandardized) scale."""

    variable: str
    lo: float = -math.inf
    hi: float = math.inf

    def mask(self, data: Microdata) -> np.ndarray:
        x = data.columns[self.variable]
        return (x >= self.lo) & (x <= self.hi)

    def __str__(self):
        return f"{self.variable} in [{self.lo!r},{self.hi!r}]"


_LEVEL_RE = re.compile(r"^\s*([\w.]+)\s*=\s*(.+?)\s*$")
_SET_RE = re.compile(r"^\s*([\w.]+)\s+in\s+\{(.*)\}\s*$")
_RANGE_RE = re.compile(r"^\s*([\w.]+)\s+in\s+\[\s*([^,]*)\s*,\s*([^\]]*)\s*\]\s*$")


def _bound(text, default):
    text = text.strip()
    return default if text in ("", "*") else float(text)


@dataclass(frozen=True)
class SubgroupQuery:
    """A named conjunction of clauses.  No clauses matches everyone."""

    name: str
    clauses: tuple[LevelClause | RangeClause, ...] = ()

    def validate(self, schema: Schema):
        for c in self.clauses:
            if c.variable not in schema:
                raise SchemaError(f"query {self.name!r}: unknown variable {c.variable!r}")
            spec = schema[c.variable]
            if isinstance(c, LevelClause):
                if not spec.is_categorical:
                    raise SchemaError(f"query {self.name!r}: {c.variable} is not categorical")
                bad = [lv for lv in c.levels if lv not in spec.levels]
                if bad:
                    raise SchemaError(f"query {self.name!r}: unknown levels {bad}")
            else:
                if spec.is_categorical:
                    raise SchemaError(f"query {self.name!r}: {c.variable} is not real")
                if not c.lo <= c.hi:
                    raise SchemaError(f"query {self.name!r}: empty interval on {c.variable}")
        return self

    def mask(self, data: Microdata) -> np.ndarray:
        m = np.ones(len(data), dtype=bool)
        for c in self.clauses:
            m &= c.mask(data)
        return m

    @property
    def expression(self) -> str:
        return " & ".join(str(c) for c in self.clauses) or "*"

    @classmethod
    def parse(cls, name: str, text: str, schema: Schema | None = None) -> "SubgroupQuery":
        """Parse ``"sex=female & age in [18, 29] & race in {white|black}"``.

        ``*`` (or an empty string) is the match-all query; an empty interval
        bound means unbounded.
        """
        clauses = []
        text = text.strip()
        if text not in ("", "*"):
            for part in text.split("&"):
                if m := _RANGE_RE.match(part):
                    clauses.append(RangeClause(m[1], _bound(m[2], -math.inf), _bound(m[3], math.inf)))
                elif m := _SET_RE.match(part):
                    levels = tuple(lv.strip() for lv in m[2].split("|") if lv.strip())
                    clauses.append(LevelClause(m[1], levels))
                elif m := _LEVEL_RE.match(part):
                    clauses.append(LevelClause(m[1], (m[2],)))
                else:
                    raise SchemaError(f"cannot parse query clause {part.strip()!r}")
        q = cls(name, tuple(clauses))
        return q.validate(schema) if schema is not None else q


def subgroup_embedding(data: Microdata, query: SubgroupQuery, featurizer: Featurizer):
    """Mean embedding over the records matching ``query``, or None if none match."""
    mask = query.mask(data)
    if not mask.any():
        return None
    return featurizer.mean_embedding(data.take(mask))


def predict_subgroup(fit: ModelFit, mu, weight_total: float):
    """Outcome probabilities and expected counts for one subgroup embedding."""
    probs = fit.predict_proba(np.asarray(mu, dtype=float))
    return probs, probs * weight_total


@dataclass(frozen=True, eq=False)
class SubgroupEstimates:
    """Per-region expected counts and weight totals for a list of queries.

    ``counts[r, q]`` is the 3-vector of expected counts and ``weights[r, q]``
    the matching weight total; regions with no matching records hold zeros
    and ``present[r, q]`` is False.
    """

    regions: tuple[str, ...]
    queries: tuple[SubgroupQuery, ...]
    counts: np.ndarray
    weights: np.ndarray
    present: np.ndarray

    def aggregate(self, region_mask=None):
        """Summed expected counts (n_queries x 3) and weights over selected regions.

        Regions are added one at a time in sorted-id order, so a total equals
        the running sum of the per-region rows exactly.
        """
        sel = np.arange(len(self.regions)) if region_mask is None else \
            np.flatnonzero(np.asarray(region_mask, bool))
        counts = np.zeros(self.counts.shape[1:])
        weights = np.zeros(self.weights.shape[1:])
        for r in sel:
            counts += self.counts[r]
            weights += self.weights[r]
        return counts, weights


def estimate_subgroups(fit: ModelFit, featurizer: Featurizer, data: Microdata,
                       queries: Sequence[SubgroupQuery], workers: int = 1) -> SubgroupEstimates:
    """Expected counts for every (region, query) pair.

    Each region's feature matrix is built once and reused across queries.
    """
    for q in queries:
        q.validate(data.schema)
    index = data.region_index()
    regions = tuple(index)
    nq = len(queries)

    def one(rid):
        part = data.take(index[rid])
        phi = fit.select(featurizer.transform(part))
        out = np.zeros((nq, 3))
        wts = np.zeros(nq)
        present = np.zeros(nq, bool)
        for j, q in enumerate(queries):
            m = q.mask(part)
            if not m.any():
                continue
            w = part.weights[m]
            W = float(w.sum())
            mu = (w @ phi[m]) / W
            probs = softmax(fit.intercepts + mu @ fit.beta)
            out[j] = probs * W
            wts[j] = W
            present[j] = True
        return out, wts, present

    if workers > 1 and len(regions) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            res = list(pool.map(one, regions))
    else:
        res = [one(r) for r in regions]
    counts = np.array([r[0] for r in res]).reshape(len(regions), nq, 3)
    weights = np.array([r[1] for r in res]).reshape(len(regions), nq)
    present = np.array([r[2] for r in res]).reshape(len(regions), nq)
    return SubgroupEstimates(regions, tuple(queries), counts, weights, present)


def two_party(expected_counts):
    """(share_A, share_B, participation) from expected counts and the weight total.

    ``expected_counts`` is ``[E[A], E[B], E[other]]``; the weight total is
    their sum.
    """
    c = np.asarray(expected_counts, dtype=float)
    voters = c[..., 0] + c[..., 1]
    total = c.sum(axis=-1)
    share_a = c[..., 0] / voters
    return share_a, 1.0 - share_a, voters / total


@dataclass(frozen=True)
class ExitPollRow:
    group: str
    share_A: float
    share_B: float
    fraction_of_electorate: float | None
    participation_rate: float
    other_nonvoting: float
    level: str = "national"
    unit_id: str = "national"
    weight_total: float = 0.0
    expected_counts: tuple[float, float, float] = (0.0, 0.0, 0.0)
    low_support: bool = False

    def as_csv_row(self):
        frac = "" if self.fraction_of_electorate is None else repr(float(self.fraction_of_electorate))
        return [self.group, repr(float(self.share_A)), repr(float(self.share_B)), frac,
                repr(float(self.participation_rate)), repr(float(self.other_nonvoting)),
                self.level, self.unit_id]


def _is_partition(data: Microdata, queries) -> bool:
    hits = np.zeros(len(data), dtype=int)
    for q in queries:
        hits += q.mask(data)
    return bool(np.all(hits == 1))


def _rows_for_unit(est_counts, est_weights, queries, level, unit, partition, floor):
    rows = []
    voters = est_counts[:, 0] + est_counts[:, 1]
    electorate = voters.sum()
    for j, q in enumerate(queries):
        W = float(est_weights[j])
        if W <= 0:
            continue
        c = est_counts[j]
        share_a = float(c[0] / voters[j])
        participation = float(voters[j] / c.sum())
        frac = float(voters[j] / electorate) if partition else None
        rows.append(ExitPollRow(q.name, share_a, 1.0 - share_a, frac, participation,
                                1.0 - participation, level, unit, W, tuple(float(x) for x in c),
                                W < floor))
    return rows


def exit_poll_table(fit: ModelFit, featurizer: Featurizer, data: Microdata,
                    queries: Sequence[SubgroupQuery], level: str = "national",
                    partition: bool = False, region_states: Mapping[str, str] | None = None,
                    low_support_floor: float = LOW_SUPPORT_FLOOR, workers: int = 1,
                    estimates: SubgroupEstimates | None = None) -> list[ExitPollRow]:
    """Exit-poll-style rows per query at one aggregation level.

    Expected counts are summed over the regions of each unit.  Fraction of
    electorate is the group's share of predicted two-party voters over all
    queries, and is only filled in when ``partition`` is set and the queries
    really do partition the records.  Output is ordered by unit id, then by
    query order.
    """
    if not queries:
        raise ValueError("queries must be nonempty")
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}")
    est = estimates or estimate_subgroups(fit, featurizer, data, queries, workers)
    partition = partition and _is_partition(data, queries)
    if level == "national":
        c, w = est.aggregate()
        return _rows_for_unit(c, w, queries, level, "national", partition, low_support_floor)
    if level == "per-region":
        rows = []
        for r, rid in enumerate(est.regions):
            rows += _rows_for_unit(est.counts[r], est.weights[r], queries, level, rid, partition,
                                   low_support_floor)
        return rows
    if region_states is None:
        raise ValueError("per-state tables need a region -> state mapping")
    states = np.array([str(region_states[r]) for r in est.regions])
    rows = []
    for s in sorted(set(states.tolist())):
        c, w = est.aggregate(states == s)
        rows += _rows_for_unit(c, w, queries, level, s, partition, low_support_floor)
    return rows


@dataclass(frozen=True)
class GenderGap:
    """Two-party share of B among group 1 minus group 2, in percentage points."""

    per_region: Mapping[str, float]
    national: float
    omitted: tuple[str, ...]
    low_support: tuple[str, ...]
    weights: Mapping[str, tuple[float, float]]


def gender_gap(fit: ModelFit, featurizer: Featurizer, data: Microdata,
               query_1: SubgroupQuery, query_2: SubgroupQuery,
               low_support_floor: float = LOW_SUPPORT_FLOOR, workers: int = 1) -> GenderGap:
    """Per-region and national gap ``share_B(query_1) - share_B(query_2)`` in points.

    Regions where either query matches nobody are omitted and listed.
    """
    est = estimate_subgroups(fit, featurizer, data, [query_1, query_2], workers)
    per_region, weights, omitted, low = {}, {}, [], []
    for r, rid in enumerate(est.regions):
        if not est.present[r].all():
            omitted.append(rid)
            continue
        _, b, _ = two_party(est.counts[r])
        per_region[rid] = 100.0 * float(b[0] - b[1])
        w = est.weights[r]
        weights[rid] = (float(w[0]), float(w[1]))
        if min(w) < low_support_floor:
            low.append(rid)
    c, _ = est.aggregate()
    _, b, _ = two_party(c)
    return GenderGap(per_region, 100.0 * float(b[0] - b[1]), tuple(omitted), tuple(low), weights)


@dataclass(frozen=True)
class ScatterPoint:
    row_id: str
    kind: RowKind
    observed: tuple[float, float, float]
    predicted: tuple[float, float, float]


def fit_scatter(fit: ModelFit, problem: DesignProblem) -> list[ScatterPoint]:
    """Observed shares against predicted probabilities for every training row."""
    P = softmax(fit.intercepts + problem.X @ fit.beta)
    obs = problem.Y / problem.Y.sum(axis=1, keepdims=True)
    return [ScatterPoint(rid, kind, tuple(map(float, o)), tuple(map(float, p)))
            for rid, kind, o, p in zip(problem.row_ids, problem.kinds, obs, P)]


def scatter_r2(points: Sequence[ScatterPoint]) -> float:
    """Coefficient of determination of predicted vs. observed shares, all classes pooled."""
    obs = np.array([p.observed for p in points]).ravel()
    pred = np.array([p.predicted for p in points]).ravel()
    ss_res = np.sum((obs - pred) ** 2)
    ss_tot = np.sum((obs - obs.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot)


# -- writers -----------------------------------------------------------------


def write_exit_poll_csv(rows: Sequence[ExitPollRow], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXIT_POLL_HEADER)
        for row in rows:
            w.writerow(row.as_csv_row())


def write_sidecar(path, metadata: Mapping):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_gender_gap_csv(gap: GenderGap, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "gap_pp", "weight_1", "weight_2", "low_support"])
        low = set(gap.low_support)
        for rid in sorted(gap.per_region):
            w1, w2 = gap.weights[rid]
            w.writerow([rid, repr(gap.per_region[rid]), repr(w1), repr(w2), int(rid in low)])
        w.writerow(["national", repr(gap.national), "", "", 0])


def write_scatter_csv(points: Sequence[ScatterPoint], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "kind", "obs_A", "obs_B", "obs_other",
                    "pred_A", "pred_B", "pred_other"])
        for p in points:
            w.writerow([p.row_id, p.kind.value, *map(repr, p.observed), *map(repr, p.predicted)])
