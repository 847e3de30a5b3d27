"""Ingestion, geography merging, exit-poll augmentation, synthetic data and persistence.

File contracts (UTF-8, comma separated, ``.`` decimal):

* ``records.csv``   ``region_id,weight,<var1>,<var2>,...``
* ``outcomes.csv``  ``geo_id,count_A,count_B,count_other``
* ``crosswalk.csv`` ``geo_id,region_id,allocation``
* ``exitpoll.csv``  ``state,group,query,share_A,share_B,participation``
* ``schema.json``   variables and interactions, see :meth:`Schema.to_dict`

Fits and embeddings are stored in a small binary container: 8 magic bytes,
a little-endian uint64 length, a JSON metadata block and a little-endian
float64 payload.  The metadata carries a SHA-256 over the rest of the file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from ._rng import substream
from .data_model import (Microdata, OutcomeCounts, Record, RegionRow, RegionTable, RowKind,
                         Schema)
from .errors import (EmptySubgroup, HashMismatch, IncompatibleVersion, MissingYear, ParseError,
                     SchemaMismatch, UnmappedGeography, ValidationError)
from .featurizer import EmbeddingMatrix, Featurizer, FeaturizerConfig, FeatureLayout
from .inference import SubgroupQuery
from .solver import CVEntry, ModelFit

__all__ = [
    "read_schema", "write_schema",
    "write_records", "load_records", "load_microdata", "iter_regions",
    "read_outcomes", "write_outcomes", "Crosswalk", "read_crosswalk", "merge_outcomes",
    "read_region_table", "write_region_table", "read_region_states",
    "adjust_weights",
    "ExitPollRecord", "read_exitpoll", "build_augmentation_rows",
    "SyntheticSpec", "SyntheticData", "generate_synthetic",
    "save_fit", "load_fit", "save_embeddings", "load_embeddings",
    "FIT_MAGIC", "EMBEDDING_MAGIC", "FORMAT_VERSION",
]

FIT_MAGIC = b"ECOREG01"
EMBEDDING_MAGIC = b"ECOEMB01"
FORMAT_VERSION = 1
OUTCOME_HEADER = ["geo_id", "count_A", "count_B", "count_other"]
CROSSWALK_HEADER = ["geo_id", "region_id", "allocation"]
EXITPOLL_HEADER = ["state", "group", "query", "share_A", "share_B", "participation"]
REGION_TABLE_HEADER = ["row_id", "region_id", "kind", "count_A", "count_B", "count_other"]


def _fmt(x) -> str:
    return repr(float(x))


def _float(text, line, what):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ParseError(line, f"{what}: {text!r} is not a number") from None
    if not math.isfinite(v):
        raise ParseError(line, f"{what}: {text!r} is not finite")
    return v


def _reader(path):
    fh = open(path, newline="", encoding="utf-8")
    return fh, csv.reader(fh)


def _expect_header(reader, expected, path):
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaMismatch(f"{path}: empty file") from None
    if [h.strip() for h in header] != list(expected):
        raise SchemaMismatch(f"{path}: header {header} != {list(expected)}")


# -- schema -----------------------------------------------------------------------


def read_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_dict(json.load(fh))


def write_schema(schema: Schema, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


# -- records -----------------------------------------------------------------------


def write_records(data: Microdata | Sequence[Record], path, schema: Schema | None = None):
    if not isinstance(data, Microdata):
        data = Microdata.from_records(schema, list(data))
    schema = data.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "weight", *schema.names])
        cols = []
        for spec in schema.variables:
            c = data.columns[spec.name]
            cols.append([spec.levels[k] for k in c] if spec.is_categorical else [_fmt(x) for x in c])
        for i in range(len(data)):
            w.writerow([data.region_ids[i], _fmt(data.weights[i]), *(c[i] for c in cols)])


def _iter_rows(path, schema: Schema):
    """Yield (line, region_id, weight, codes/values tuple) with strict parsing."""
    fh, reader = _reader(path)
    with fh:
        _expect_header(reader, ["region_id", "weight", *schema.names], path)
        level_index = [{lv: k for k, lv in enumerate(s.levels)} if s.is_categorical else None
                       for s in schema.variables]
        width = 2 + len(schema.variables)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(line, f"expected {width} fields, got {len(row)}")
            region = row[0].strip()
            if not region:
                raise ParseError(line, "empty region_id")
            weight = _float(row[1], line, "weight")
            if weight <= 0:
                raise ParseError(line, f"weight {weight} is not positive")
            vals = []
            for spec, idx, text in zip(schema.variables, level_index, row[2:]):
                if idx is None:
                    vals.append(_float(text, line, spec.name))
                else:
                    if text not in idx:
                        raise ParseError(line, f"{spec.name}: unknown level {text!r}")
                    vals.append(idx[text])
            yield line, region, weight, vals


def _to_microdata(schema, rows) -> Microdata:
    regions = [r[1] for r in rows]
    weights = [r[2] for r in rows]
    cols = {}
    for k, spec in enumerate(schema.variables):
        dtype = np.int64 if spec.is_categorical else float
        cols[spec.name] = np.array([r[3][k] for r in rows], dtype=dtype)
    return Microdata(schema, np.array(regions, dtype=str), np.array(weights, dtype=float), cols)


def load_microdata(path, schema: Schema) -> Microdata:
    """Load ``records.csv`` into columnar form.  Missing or malformed values raise ParseError."""
    return _to_microdata(schema, list(_iter_rows(path, schema)))


def load_records(path, schema: Schema) -> list[Record]:
    return load_microdata(path, schema).to_records()


def iter_regions(path, schema: Schema) -> Iterator[tuple[str, Microdata]]:
    """Stream ``records.csv`` one region at a time.

    Memory is bounded by the largest region.  Records of a region must be
    contiguous in the file; a region that reappears raises ParseError.
    """
    seen = set()
    current, buf = None, []
    for row in _iter_rows(path, schema):
        region = row[1]
        if region != current:
            if buf:
                yield current, _to_microdata(schema, buf)
            if region in seen:
                raise ParseError(row[0], f"region {region!r} is not contiguous")
            seen.add(region)
            current, buf = region, []
        buf.append(row)
    if buf:
        yield current, _to_microdata(schema, buf)


# -- outcomes and crosswalks -----------------------------------------------------------


def read_outcomes(path) -> dict[str, np.ndarray]:
    fh, reader = _reader(path)
    out = {}
    with fh:
        _expect_header(reader, OUTCOME_HEADER, path)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(line, f"expected 4 fields, got {len(row)}")
            geo = row[0].strip()
            if geo in out:
                raise ParseError(line, f"duplicate geo_id {geo!r}")
            c = np.array([_float(x, line, h) for x, h in zip(row[1:], OUTCOME_HEADER[1:])])
            if np.any(c < 0):
                raise ParseError(line, "negative count")
            out[geo] = c
    return out


def write_outcomes(counts: Mapping[str, Sequence[float]] | RegionTable, path):
    if isinstance(counts, RegionTable):
        counts = {r.row_id: r.outcome.counts for r in counts.rows}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTCOME_HEADER)
        for geo, c in counts.items():
            w.writerow([geo, *map(_fmt, c)])


@dataclass(frozen=True)
class Crosswalk:
    """Allocation of source geographies to analysis regions."""

    pairs: tuple[tuple[str, str, float], ...]

    def __post_init__(self):
        totals = defaultdict(list)
        for geo, region, a in self.pairs:
            if not 0.0 < a <= 1.0:
                raise ValidationError(f"allocation {a} for {geo}->{region} not in (0, 1]")
            totals[geo].append(a)
        for geo, parts in totals.items():
            if abs(math.fsum(parts) - 1.0) > 1e-9:
                raise ValidationError(f"allocations for {geo!r} sum to {math.fsum(parts)}")

    def allocations(self) -> dict[str, list[tuple[str, float]]]:
        out = defaultdict(list)
        for geo, region, a in self.pairs:
            out[geo].append((region, a))
        return dict(out)

    @classmethod
    def identity(cls, geo_ids):
        return cls(tuple((g, g, 1.0) for g in geo_ids))


def read_crosswalk(path) -> Crosswalk:
    fh, reader = _reader(path)
    pairs = []
    with fh:
        _expect_header(reader, CROSSWALK_HEADER, path)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(line, f"expected 3 fields, got {len(row)}")
            pairs.append((row[0].strip(), row[1].strip(), _float(row[2], line, "allocation")))
    return Crosswalk(tuple(pairs))


def merge_outcomes(county_counts: Mapping[str, Sequence[float]], crosswalk: Crosswalk) -> RegionTable:
    """Allocate source-geography counts to regions (rows sorted by region id)."""
    alloc = crosswalk.allocations()
    parts = defaultdict(list)
    for geo, c in county_counts.items():
        if geo not in alloc:
            raise UnmappedGeography(geo)
        c = np.asarray(c, dtype=float)
        for region, a in alloc[geo]:
            parts[region].append(a * c)
    rows = []
    for region in sorted(parts):
        stacked = np.array(parts[region])
        c = tuple(math.fsum(stacked[:, k]) for k in range(3))
        rows.append(RegionRow(region, region, RowKind.TRUE_OUTCOME, OutcomeCounts(c)))
    return RegionTable(tuple(rows))


def write_region_table(table: RegionTable, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGION_TABLE_HEADER)
        for r in table.rows:
            w.writerow([r.row_id, r.region_id, r.kind.value, *map(_fmt, r.outcome.counts)])


def read_region_table(path) -> RegionTable:
    fh, reader = _reader(path)
    rows = []
    with fh:
        _expect_header(reader, REGION_TABLE_HEADER, path)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ParseError(line, f"expected 6 fields, got {len(row)}")
            try:
                kind = RowKind(row[2])
            except ValueError:
                raise ParseError(line, f"unknown row kind {row[2]!r}") from None
            c = tuple(_float(x, line, "count") for x in row[3:])
            rows.append(RegionRow(row[0], row[1], kind, OutcomeCounts(c)))
    return RegionTable(tuple(rows))


def read_region_states(path) -> dict[str, str]:
    """``region_id,state`` mapping used for per-state tables and exit-poll rows."""
    fh, reader = _reader(path)
    out = {}
    with fh:
        _expect_header(reader, ["region_id", "state"], path)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(line, f"expected 2 fields, got {len(row)}")
            out[row[0].strip()] = row[1].strip()
    return out


# -- survey-year weight adjustment -------------------------------------------------------


def adjust_weights(records_by_year: Mapping, reference_years: Sequence, target_year):
    """Rescale the target year's person weights region by region.

    Each region's target-year weights are multiplied by one factor so their
    total equals the mean per-year weight total of that region over the
    reference years in which it appears.  Regions absent from every
    reference year keep factor 1.  Returns ``(adjusted, factors)``.
    """
    if not reference_years:
        raise ValueError("need at least one reference year")
    for y in (*reference_years, target_year):
        if y not in records_by_year:
            raise MissingYear(y)
    ref_totals = defaultdict(list)
    for y in reference_years:
        d = records_by_year[y]
        for region, idx in d.region_index().items():
            ref_totals[region].append(math.fsum(d.weights[idx]))
    target = records_by_year[target_year]
    factors = {}
    new_w = target.weights.copy()
    for region, idx in target.region_index().items():
        if region in ref_totals:
            ref_mean = math.fsum(ref_totals[region]) / len(ref_totals[region])
            f = ref_mean / math.fsum(target.weights[idx])
        else:
            f = 1.0
        factors[region] = f
        new_w[idx] = target.weights[idx] * f
    return target.with_weights(new_w), factors


# -- exit-poll augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class ExitPollRecord:
    state: str
    group: str
    query: SubgroupQuery
    share_A: float
    share_B: float
    participation: float | None = None

    def __post_init__(self):
        for v in (self.share_A, self.share_B):
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{self.state}/{self.group}: share {v} not in [0, 1]")
        if self.share_A + self.share_B > 1.0 + 1e-9 or self.share_A + self.share_B <= 0:
            raise ValidationError(f"{self.state}/{self.group}: shares must sum to (0, 1]")
        if self.participation is not None and not 0.0 <= self.participation <= 1.0:
            raise ValidationError(f"{self.state}/{self.group}: participation not in [0, 1]")

    @property
    def two_party(self) -> tuple[float, float]:
        s = self.share_A + self.share_B
        return self.share_A / s, self.share_B / s


def read_exitpoll(path, schema: Schema) -> list[ExitPollRecord]:
    """Read ``exitpoll.csv``; an empty or ``NA`` participation means unknown."""
    fh, reader = _reader(path)
    out = []
    with fh:
        _expect_header(reader, EXITPOLL_HEADER, path)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ParseError(line, f"expected 6 fields, got {len(row)}")
            state, group, qtext = (x.strip() for x in row[:3])
            try:
                query = SubgroupQuery.parse(group, qtext, schema)
            except ValidationError as exc:
                raise ParseError(line, str(exc)) from None
            part = None if row[5].strip() in ("", "NA") else _float(row[5], line, "participation")
            try:
                out.append(ExitPollRecord(state, group, query, _float(row[3], line, "share_A"),
                                          _float(row[4], line, "share_B"), part))
            except ValidationError as exc:
                raise ParseError(line, str(exc)) from None
    return out


def build_augmentation_rows(exit_polls: Sequence[ExitPollRecord], data: Microdata,
                            featurizer: Featurizer, region_states: Mapping[str, str],
                            default_participation: float):
    """Embedding rows and pseudo-counts for state-level exit-poll subgroups.

    Pseudo-counts are ``W * participation * (share_A, share_B)`` (two-party
    shares) with ``W * (1 - participation)`` in the third class, where ``W``
    is the subgroup's weight total in the state.  Rows with unknown
    participation use ``default_participation``.
    """
    states = np.array([region_states.get(str(r), "") for r in data.region_ids])
    rows, mus, totals, ids = [], [], [], []
    for ep in exit_polls:
        in_state = states == ep.state
        mask = in_state & ep.query.mask(data)
        if not mask.any():
            raise EmptySubgroup(ep.state, ep.group)
        mu, W = featurizer.mean_embedding(data.take(mask))
        part = default_participation if ep.participation is None else ep.participation
        sa, sb = ep.two_party
        counts = (W * part * sa, W * part * sb, W * (1.0 - part))
        row_id = f"exitpoll:{ep.state}:{ep.group}"
        rows.append(RegionRow(row_id, ep.state, RowKind.EXIT_POLL, OutcomeCounts(counts)))
        mus.append(mu)
        totals.append(W)
        ids.append(row_id)
    p = featurizer.layout.n_features
    emb = EmbeddingMatrix(np.array(mus).reshape(len(mus), p), np.array(totals), featurizer.layout,
                          tuple(ids), (RowKind.EXIT_POLL,) * len(ids))
    return emb, RegionTable(tuple(rows))


# -- synthetic data ---------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    ``effects`` maps a feature-group name to either a scale (coefficients
    drawn N(0, scale^2 / span) for classes A and B) or an explicit array of
    shape (span, 2) or (span, 3).  Groups not listed have zero coefficients.
    ``baseline`` is the class distribution at the average embedding.
    """

    schema: Schema
    n_regions: int = 100
    samples_per_region: tuple[int, int] = (50, 200)
    effects: Mapping[str, object] = field(default_factory=dict)
    baseline: tuple[float, float, float] = (0.25, 0.25, 0.5)
    featurizer: FeaturizerConfig = FeaturizerConfig()
    weight_range: tuple[float, float] = (50.0, 150.0)
    dirichlet_concentration: float = 2.0
    real_region_sd: float = 1.0
    count_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.samples_per_region
        if self.n_regions < 1 or lo < 1 or hi < lo:
            raise ValidationError("bad region or sample counts")
        if not self.count_scale > 0:
            raise ValidationError("count_scale must be positive")
        if not (0 < self.weight_range[0] <= self.weight_range[1]):
            raise ValidationError("bad weight range")
        b = np.asarray(self.baseline, dtype=float)
        if b.shape != (3,) or np.any(b <= 0):
            raise ValidationError("baseline must be 3 positive numbers")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        d = dict(d)
        schema = Schema.from_dict(d.pop("schema"))
        feat = FeaturizerConfig.from_dict(d.pop("featurizer", {}))
        for k in ("samples_per_region", "baseline", "weight_range"):
            if k in d:
                d[k] = tuple(d[k])
        effects = {k: (np.asarray(v, dtype=float) if isinstance(v, (list, tuple)) else float(v))
                   for k, v in d.pop("effects", {}).items()}
        return cls(schema=schema, featurizer=feat, effects=effects, **d)


@dataclass(frozen=True, eq=False)
class SyntheticData:
    microdata: Microdata
    table: RegionTable
    featurizer: Featurizer
    embedding: EmbeddingMatrix
    beta: np.ndarray
    intercepts: np.ndarray
    probs: np.ndarray

    def true_fit(self) -> ModelFit:
        return ModelFit(self.beta, self.intercepts, 1.0, 0.0, self.featurizer.layout)

    @property
    def active_groups(self) -> list[str]:
        return [g.name for g in self.featurizer.layout.groups
                if np.any(self.beta[g.start:g.end] != 0)]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Draw microdata and outcome counts from the model itself.

    Each region gets its own category frequencies (Dirichlet) and real
    variable means; individuals get uniform person weights.  The region
    total is the rounded weight total times ``count_scale`` and counts are
    multinomial under the true coefficients.  Pure function of ``spec``.
    """
    rng = substream(spec.seed, "synthesis")
    schema = spec.schema
    lo, hi = spec.samples_per_region
    region_ids, weights, cols = [], [], {v.name: [] for v in schema.variables}
    for r in range(spec.n_regions):
        rid = f"R{r:04d}"
        m = int(rng.integers(lo, hi + 1))
        region_ids += [rid] * m
        weights.append(rng.uniform(*spec.weight_range, size=m))
        for v in schema.variables:
            if v.is_categorical:
                freq = rng.dirichlet(np.full(len(v.levels), spec.dirichlet_concentration))
                cols[v.name].append(rng.choice(len(v.levels), size=m, p=freq))
            else:
                mean = rng.normal(0.0, spec.real_region_sd)
                cols[v.name].append(rng.normal(mean, 1.0, size=m))
    data = Microdata(schema, np.array(region_ids, dtype=str), np.concatenate(weights),
                     {k: np.concatenate(v) for k, v in cols.items()})
    feat = Featurizer.fit(data, spec.featurizer)
    emb = feat.embed(data)
    layout = feat.layout

    beta = np.zeros((layout.n_features, 3))
    coef_rng = substream(spec.seed, "coefficients")
    for g in layout.groups:  # layout order keeps draws independent of dict order
        if g.name not in spec.effects:
            continue
        eff = spec.effects[g.name]
        if np.ndim(eff) == 0:
            beta[g.start:g.end, :2] = coef_rng.normal(0.0, float(eff) / math.sqrt(g.span),
                                                      size=(g.span, 2))
        else:
            eff = np.asarray(eff, dtype=float)
            if eff.shape[0] != g.span or eff.shape[1] not in (2, 3):
                raise ValidationError(f"effect for {g.name!r} must have shape ({g.span}, 2|3)")
            full = np.zeros((g.span, 3))
            full[:, :eff.shape[1]] = eff
            beta[g.start:g.end] = full - full[:, 2:3]
    unknown = set(spec.effects) - set(layout.names)
    if unknown:
        raise ValidationError(f"effects for unknown groups {sorted(unknown)}")
    base = np.log(np.asarray(spec.baseline, dtype=float))
    base = base - base[2]
    xbar = emb.row_weight_totals @ emb.rows / emb.row_weight_totals.sum()
    intercepts = base - xbar @ beta
    eta = intercepts + emb.rows @ beta
    probs = np.exp(eta - eta.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    count_rng = substream(spec.seed, "outcomes")
    rows = []
    for rid, W, p in zip(emb.row_ids, emb.row_weight_totals, probs):
        total = max(int(round(W * spec.count_scale)), 1)
        c = count_rng.multinomial(total, p)
        rows.append(RegionRow(rid, rid, RowKind.TRUE_OUTCOME, OutcomeCounts(tuple(map(float, c)))))
    return SyntheticData(data, RegionTable(tuple(rows)), feat, emb, beta, intercepts, probs)


# -- binary containers -------------------------------------------------------------------


def _digest(meta: Mapping, payload: bytes) -> str:
    body = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(body + payload).hexdigest()


def _write_container(path, magic: bytes, meta: dict, arrays: Sequence[np.ndarray]):
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    meta = dict(meta, format_version=FORMAT_VERSION)
    meta["content_hash"] = _digest(meta, payload)
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def _read_container(path, magic: bytes):
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise IncompatibleVersion(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        meta = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise HashMismatch(f"{path}: corrupt metadata block") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise IncompatibleVersion(f"{path}: format version {meta.get('format_version')}")
    payload = raw[16 + n:]
    stored = meta.pop("content_hash", None)
    if stored != _digest(meta, payload):
        raise HashMismatch(f"{path}: content hash mismatch")
    if len(payload) % 8:
        raise HashMismatch(f"{path}: truncated payload")
    return meta, np.frombuffer(payload, dtype="<f8").astype(float)


def _cv_to_list(table):
    return [[e.alpha, e.lam, e.mean_deviance, e.se, e.converged] for e in table]


def save_fit(fit: ModelFit, path, config: Mapping | None = None, seed: int | None = None):
    """Write a fit container; coefficients keep full binary precision."""
    meta = {
        "kind": "fit",
        "p": fit.layout.n_features,
        "alpha": fit.alpha,
        "lambda": fit.lam,
        "lambda_path": list(fit.lambda_path),
        "layout": fit.layout.to_list(),
        "columns": None if fit.columns is None else [int(c) for c in fit.columns],
        "cv_table": _cv_to_list(fit.cv_table),
        "converged": fit.converged,
        "n_sweeps": fit.n_sweeps,
        "metadata": fit.metadata,
        "config": dict(config or {}),
        "seed": seed,
    }
    _write_container(path, FIT_MAGIC, meta, [fit.beta.ravel(), fit.intercepts])


def load_fit(path) -> ModelFit:
    meta, values = _read_container(path, FIT_MAGIC)
    p = meta["p"]
    if len(values) != 3 * p + 3:
        raise HashMismatch(f"{path}: payload size does not match p={p}")
    fit = ModelFit(
        values[:3 * p].reshape(p, 3).copy(), values[3 * p:].copy(), meta["alpha"], meta["lambda"],
        FeatureLayout.from_list(meta["layout"]), tuple(meta["lambda_path"]),
        tuple(CVEntry(*e) for e in meta["cv_table"]),
        None if meta["columns"] is None else np.array(meta["columns"], dtype=int),
        meta["converged"], meta["n_sweeps"],
        dict(meta["metadata"], config=meta["config"], seed=meta["seed"]),
    )
    return fit


def save_embeddings(emb: EmbeddingMatrix, featurizer: Featurizer, path,
                    table: RegionTable | None = None, extra: Mapping | None = None):
    """Write embeddings, their fitted feature maps and (optionally) outcome rows."""
    meta = {
        "kind": "embedding",
        "shape": list(emb.shape),
        "row_ids": list(emb.row_ids),
        "kinds": [k.value for k in emb.kinds],
        "layout": emb.layout.to_list(),
        "featurizer": featurizer.to_dict(),
        "table": None if table is None else [
            [r.row_id, r.region_id, r.kind.value, list(r.outcome.counts)] for r in table.rows],
        "extra": dict(extra or {}),
    }
    _write_container(path, EMBEDDING_MAGIC, meta, [emb.rows.ravel(), emb.row_weight_totals])


def load_embeddings(path):
    """Returns ``(EmbeddingMatrix, Featurizer, RegionTable | None, extra)``."""
    meta, values = _read_container(path, EMBEDDING_MAGIC)
    n, p = meta["shape"]
    if len(values) != n * p + n:
        raise HashMismatch(f"{path}: payload size does not match shape")
    emb = EmbeddingMatrix(values[:n * p].reshape(n, p).copy(), values[n * p:].copy(),
                          FeatureLayout.from_list(meta["layout"]), tuple(meta["row_ids"]),
                          tuple(RowKind(k) for k in meta["kinds"]))
    feat = Featurizer.from_dict(meta["featurizer"])
    table = None
    if meta["table"] is not None:
        table = RegionTable(tuple(RegionRow(r[0], r[1], RowKind(r[2]), OutcomeCounts(tuple(r[3])))
                                  for r in meta["table"]))
    return emb, feat, table, meta["extra"]
