"""Individual-level feature maps and weighted mean embeddings.

Real variables are standardized and passed through orthogonal random
Fourier features (a Gaussian kernel approximation); categorical variables
get reference-omitted indicator coding.  Declared interaction pairs get the
flattened outer product of the two encodings, except real x real pairs,
which get their own joint random Fourier map on the standardized 2-vector.

A region is summarized by the person-weight-normalized mean of its
individuals' feature vectors.  The weight total is carried separately.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from ._rng import substream_seed
from .data_model import Microdata, Record, RowKind, Schema, VariableSpec
from .errors import ConstantVariable, EmptySubset, NonFiniteInput, UnknownLevel, ValidationError

__all__ = [
    "Standardizer",
    "fit_standardizer",
    "OrfMap",
    "build_orf",
    "median_bandwidth",
    "FeaturizerConfig",
    "FeatureGroup",
    "FeatureLayout",
    "Featurizer",
    "EmbeddingMatrix",
    "encode_categorical",
]

_MAX_BANDWIDTH_POINTS = 2000


@dataclass(frozen=True)
class Standardizer:
    means: Mapping[str, float]
    sds: Mapping[str, float]

    def transform(self, name, values):
        return (np.asarray(values, dtype=float) - self.means[name]) / self.sds[name]

    def to_dict(self):
        return {"means": dict(self.means), "sds": dict(self.sds)}

    @classmethod
    def from_dict(cls, d):
        return cls(dict(d["means"]), dict(d["sds"]))


def fit_standardizer(data: Microdata) -> Standardizer:
    """Person-weighted mean and population standard deviation per real variable."""
    w = data.weights
    means, sds = {}, {}
    for spec in data.schema.variables:
        if spec.is_categorical:
            continue
        x = data.columns[spec.name]
        m = float(np.average(x, weights=w))
        var = float(np.average((x - m) ** 2, weights=w))
        if var <= 1e-12:
            raise ConstantVariable(spec.name)
        means[spec.name] = m
        sds[spec.name] = math.sqrt(var)
    return Standardizer(means, sds)


@dataclass(frozen=True, eq=False)
class OrfMap:
    """Orthogonal random Fourier feature map for a Gaussian kernel.

    ``projection`` has ``num_features // 2`` rows.  Row ``i`` equals
    ``row_norms[i] * q_i / bandwidth`` where ``q_i`` is a row of an
    orthogonal block.
    """

    input_dim: int
    num_features: int
    bandwidth: float
    seed: int
    projection: np.ndarray
    offsets: np.ndarray
    row_norms: np.ndarray

    def orthogonal_blocks(self) -> list[np.ndarray]:
        """The orthogonal blocks before norm rescaling (last one may be truncated)."""
        q = self.projection * self.bandwidth / self.row_norms[:, None]
        d = self.input_dim
        return [q[i:i + d] for i in range(0, len(q), d)]

    def transform(self, z) -> np.ndarray:
        """Map standardized inputs ``z`` of shape (n, input_dim) to (n, num_features).

        Output is ``sqrt(2/D) [cos(W z + b), sin(W z + b)]``, cos block first.
        """
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[:, None] if self.input_dim == 1 else z[None, :]
        if z.shape[1] != self.input_dim:
            raise ValueError(f"expected input_dim {self.input_dim}, got {z.shape[1]}")
        if not np.all(np.isfinite(z)):
            raise NonFiniteInput("non-finite input to random Fourier features")
        proj = z @ self.projection.T + self.offsets
        scale = math.sqrt(2.0 / self.num_features)
        return scale * np.concatenate([np.cos(proj), np.sin(proj)], axis=1)


def build_orf(input_dim: int, num_features: int, bandwidth: float, seed: int) -> OrfMap:
    """Draw an orthogonal random Fourier feature map.

    Stacks ``ceil((D/2) / input_dim)`` independent Gaussian blocks, each
    orthogonalized by QR with each row rescaled by an independent
    chi(input_dim) norm, truncates to ``D/2`` rows and divides by the
    bandwidth.  Offsets are uniform on [0, 2 pi).
    """
    if input_dim < 1:
        raise ValueError("input_dim must be positive")
    if num_features < 2 or num_features % 2:
        raise ValueError("num_features must be even and >= 2")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    half = num_features // 2
    rng = np.random.default_rng(int(seed))
    n_blocks = -(-half // input_dim)
    blocks, norms = [], []
    for _ in range(n_blocks):
        g = rng.standard_normal((input_dim, input_dim))
        q, r = np.linalg.qr(g)
        # sign fix makes q Haar-distributed and independent of LAPACK conventions
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        q = q * signs
        blocks.append(q.T)
        norms.append(np.sqrt(rng.chisquare(input_dim, size=input_dim)))
    q = np.vstack(blocks)[:half]
    s = np.concatenate(norms)[:half]
    projection = (s[:, None] * q) / bandwidth
    offsets = rng.uniform(0.0, 2.0 * np.pi, size=half)
    for a in (projection, offsets, s):
        a.setflags(write=False)
    return OrfMap(input_dim, num_features, float(bandwidth), int(seed), projection, offsets, s)


def median_bandwidth(z, seed, max_points=_MAX_BANDWIDTH_POINTS) -> float:
    """Median pairwise Euclidean distance on a seeded subsample of ``z``."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if len(z) > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(len(z), max_points, replace=False))
        z = z[idx]
    if len(z) < 2:
        return 1.0
    d = pdist(z)
    med = float(np.median(d))
    if med > 0:
        return med
    # heavily tied data: fall back to the median nonzero distance
    nz = d[d > 0]
    return float(np.median(nz)) if len(nz) else 1.0


def encode_categorical(codes, spec: VariableSpec) -> np.ndarray:
    """Indicator columns over the non-reference levels, in declared order.

    ``codes`` are integer codes into ``spec.levels`` or level strings.
    """
    if not spec.is_categorical:
        raise TypeError(f"{spec.name} is not categorical")
    codes = np.atleast_1d(np.asarray(codes))
    if codes.dtype.kind in "UOS":
        index = {lv: k for k, lv in enumerate(spec.levels)}
        try:
            codes = np.array([index[str(c)] for c in codes], dtype=np.int64)
        except KeyError as exc:
            raise UnknownLevel(spec.name, exc.args[0]) from None
    elif len(codes) and (codes.min() < 0 or codes.max() >= len(spec.levels)):
        raise UnknownLevel(spec.name, int(codes[(codes < 0) | (codes >= len(spec.levels))][0]))
    ref = spec.levels.index(spec.reference)
    keep = [k for k in range(len(spec.levels)) if k != ref]
    return (codes[:, None] == np.array(keep)[None, :]).astype(float)


@dataclass(frozen=True)
class FeaturizerConfig:
    rff_features: int = 64
    bandwidth: str | float = "median"
    seed: int = 0
    include_interactions: bool = True

    def __post_init__(self):
        if self.rff_features < 2 or self.rff_features % 2:
            raise ValueError("rff_features must be even and >= 2")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ValueError("bandwidth must be 'median' or a positive number")
        elif not float(self.bandwidth) > 0:
            raise ValueError("bandwidth must be positive")

    def to_dict(self):
        return {"rff_features": self.rff_features, "bandwidth": self.bandwidth,
                "seed": self.seed, "include_interactions": self.include_interactions}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("rff_features", "bandwidth", "seed", "include_interactions")
                      if k in d})


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    source: tuple[str, ...]
    start: int
    end: int

    @property
    def span(self) -> int:
        return self.end - self.start

    @property
    def is_interaction(self) -> bool:
        return len(self.source) == 2


@dataclass(frozen=True)
class FeatureLayout:
    groups: tuple[FeatureGroup, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        pos = 0
        for g in self.groups:
            if g.start != pos or g.end <= g.start:
                raise ValueError(f"group {g.name!r} span breaks contiguity")
            pos = g.end
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValueError("group names must be unique")

    @property
    def n_features(self) -> int:
        return self.groups[-1].end if self.groups else 0

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]

    def __len__(self):
        return len(self.groups)

    def __getitem__(self, name) -> FeatureGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def spans(self) -> np.ndarray:
        return np.array([g.span for g in self.groups], dtype=int)

    def subset(self, names: Sequence[str]) -> tuple["FeatureLayout", np.ndarray]:
        """Layout restricted to ``names`` (in the given order) and the source columns."""
        groups, cols, pos = [], [], 0
        for name in names:
            g = self[name]
            groups.append(FeatureGroup(g.name, g.source, pos, pos + g.span))
            cols.append(np.arange(g.start, g.end))
            pos += g.span
        return FeatureLayout(tuple(groups)), np.concatenate(cols) if cols else np.array([], int)

    def to_list(self):
        return [{"name": g.name, "source": list(g.source), "start": g.start, "end": g.end}
                for g in self.groups]

    @classmethod
    def from_list(cls, items):
        return cls(tuple(FeatureGroup(d["name"], tuple(d["source"]), d["start"], d["end"])
                         for d in items))

    @classmethod
    def from_spans(cls, spans, names=None):
        """Convenience constructor for plain design matrices."""
        names = names or [f"g{i}" for i in range(len(spans))]
        groups, pos = [], 0
        for name, s in zip(names, spans):
            groups.append(FeatureGroup(name, (name,), pos, pos + int(s)))
            pos += int(s)
        return cls(tuple(groups))


def interaction_name(p: str, q: str) -> str:
    return f"{p}:{q}"


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    rows: np.ndarray
    row_weight_totals: np.ndarray
    layout: FeatureLayout
    row_ids: tuple[str, ...]
    kinds: tuple[RowKind, ...] = ()

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        totals = np.asarray(self.row_weight_totals, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != self.layout.n_features:
            raise ValueError("embedding width does not match layout")
        if totals.shape != (rows.shape[0],) or len(self.row_ids) != rows.shape[0]:
            raise ValueError("row metadata length mismatch")
        if not np.all(np.isfinite(rows)):
            raise ValueError("embedding has non-finite entries")
        if np.any(totals <= 0):
            raise ValueError("row weight totals must be positive")
        kinds = tuple(self.kinds) or (RowKind.TRUE_OUTCOME,) * len(totals)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "row_weight_totals", totals)
        object.__setattr__(self, "row_ids", tuple(str(r) for r in self.row_ids))
        object.__setattr__(self, "kinds", tuple(RowKind(k) for k in kinds))

    @property
    def shape(self):
        return self.rows.shape

    def select_rows(self, row_ids: Sequence[str]) -> "EmbeddingMatrix":
        pos = {r: i for i, r in enumerate(self.row_ids)}
        idx = np.array([pos[str(r)] for r in row_ids], dtype=int)
        return EmbeddingMatrix(self.rows[idx], self.row_weight_totals[idx], self.layout,
                               tuple(self.row_ids[i] for i in idx),
                               tuple(self.kinds[i] for i in idx))

    def append(self, other: "EmbeddingMatrix") -> "EmbeddingMatrix":
        if other.layout != self.layout:
            raise ValueError("layouts differ")
        return EmbeddingMatrix(np.vstack([self.rows, other.rows]),
                               np.concatenate([self.row_weight_totals, other.row_weight_totals]),
                               self.layout, self.row_ids + other.row_ids, self.kinds + other.kinds)


@dataclass(frozen=True, eq=False)
class Featurizer:
    """Fitted feature maps: standardizer, per-group ORF maps and the layout.

    Build one with :meth:`fit`; it is immutable afterwards and can be shared
    across threads.
    """

    schema: Schema
    config: FeaturizerConfig
    standardizer: Standardizer
    bandwidths: Mapping[str, float]
    orf_seeds: Mapping[str, int]
    layout: FeatureLayout = field(init=False)
    orf_maps: Mapping[str, OrfMap] = field(init=False)

    def __post_init__(self):
        D = self.config.rff_features
        maps, groups, pos = {}, [], 0
        for spec in self.schema.variables:
            if spec.is_categorical:
                span = len(spec.levels) - 1
            else:
                maps[spec.name] = build_orf(1, D, self.bandwidths[spec.name],
                                            self.orf_seeds[spec.name])
                span = D
            groups.append(FeatureGroup(spec.name, (spec.name,), pos, pos + span))
            pos += span
        if self.config.include_interactions:
            for p, q in self.schema.interactions:
                sp, sq = self.schema[p], self.schema[q]
                name = interaction_name(p, q)
                if not sp.is_categorical and not sq.is_categorical:
                    maps[name] = build_orf(2, D, self.bandwidths[name], self.orf_seeds[name])
                    span = D
                else:
                    span = self._width(sp) * self._width(sq)
                groups.append(FeatureGroup(name, (p, q), pos, pos + span))
                pos += span
        object.__setattr__(self, "layout", FeatureLayout(tuple(groups)))
        object.__setattr__(self, "orf_maps", maps)

    def _width(self, spec):
        return len(spec.levels) - 1 if spec.is_categorical else self.config.rff_features

    @classmethod
    def fit(cls, data: Microdata, config: FeaturizerConfig | None = None) -> "Featurizer":
        """Fit standardizer and bandwidths on ``data`` and draw the ORF maps."""
        config = config or FeaturizerConfig()
        schema = data.schema
        std = fit_standardizer(data)
        bandwidths, seeds = {}, {}

        def bandwidth(name, z):
            if config.bandwidth == "median":
                return median_bandwidth(z, substream_seed(config.seed, "bandwidth", name))
            return float(config.bandwidth)

        for spec in schema.variables:
            if not spec.is_categorical:
                z = std.transform(spec.name, data.columns[spec.name])
                bandwidths[spec.name] = bandwidth(spec.name, z)
                seeds[spec.name] = substream_seed(config.seed, "orf", spec.name)
        if config.include_interactions:
            for p, q in schema.interactions:
                if not schema[p].is_categorical and not schema[q].is_categorical:
                    name = interaction_name(p, q)
                    z = np.column_stack([std.transform(p, data.columns[p]),
                                         std.transform(q, data.columns[q])])
                    bandwidths[name] = bandwidth(name, z)
                    seeds[name] = substream_seed(config.seed, "orf", name)
        return cls(schema, config, std, bandwidths, seeds)

    # -- per-variable encoders -------------------------------------------------

    def encode_real(self, values, name: str) -> np.ndarray:
        spec = self.schema[name]
        if spec.is_categorical:
            raise TypeError(f"{name} is not real")
        values = np.atleast_1d(np.asarray(values, dtype=float))
        if not np.all(np.isfinite(values)):
            raise NonFiniteInput(f"non-finite value for {name!r}")
        return self.orf_maps[name].transform(self.standardizer.transform(name, values)[:, None])

    def encode_categorical(self, values, name: str) -> np.ndarray:
        return encode_categorical(values, self.schema[name])

    def encode_variable(self, values, name: str) -> np.ndarray:
        if self.schema[name].is_categorical:
            return self.encode_categorical(values, name)
        return self.encode_real(values, name)

    def encode_interaction(self, values_p, values_q, p: str, q: str) -> np.ndarray:
        sp, sq = self.schema[p], self.schema[q]
        if not sp.is_categorical and not sq.is_categorical:
            vp = np.atleast_1d(np.asarray(values_p, dtype=float))
            vq = np.atleast_1d(np.asarray(values_q, dtype=float))
            if not (np.all(np.isfinite(vp)) and np.all(np.isfinite(vq))):
                raise NonFiniteInput(f"non-finite value in interaction {p}:{q}")
            z = np.column_stack([self.standardizer.transform(p, vp),
                                 self.standardizer.transform(q, vq)])
            return self.orf_maps[interaction_name(p, q)].transform(z)
        a = self.encode_variable(values_p, p)
        b = self.encode_variable(values_q, q)
        return (a[:, :, None] * b[:, None, :]).reshape(len(a), -1)

    # -- whole records -----------------------------------------------------------

    def transform(self, data: Microdata) -> np.ndarray:
        """Feature matrix of shape (n_records, n_features), columns in layout order."""
        if data.schema != self.schema:
            raise ValidationError("microdata schema differs from the fitted schema")
        out = np.empty((len(data), self.layout.n_features))
        for g in self.layout.groups:
            if g.is_interaction:
                p, q = g.source
                out[:, g.start:g.end] = self.encode_interaction(data.columns[p], data.columns[q], p, q)
            else:
                out[:, g.start:g.end] = self.encode_variable(data.columns[g.name], g.name)
        return out

    def encode_record(self, record: Record) -> np.ndarray:
        return self.transform(Microdata.from_records(self.schema, [record]))[0]

    def mean_embedding(self, data: Microdata) -> tuple[np.ndarray, float]:
        """Weight-normalized mean feature vector and the weight total."""
        if len(data) == 0:
            raise EmptySubset("cannot embed an empty record set")
        w = data.weights
        total = float(w.sum())
        return (w @ self.transform(data)) / total, total

    def embed(self, data: Microdata, groups: Mapping[str, np.ndarray] | None = None,
              kind: RowKind = RowKind.TRUE_OUTCOME, workers: int = 1) -> EmbeddingMatrix:
        """One embedding row per region (sorted region id) or per entry of ``groups``.

        ``groups`` maps row id to record indices into ``data``.  Rows are
        computed independently, so the result does not depend on ``workers``.
        """
        if groups is None:
            groups = data.region_index()
        ids = list(groups)

        def one(rid):
            return self.mean_embedding(data.take(groups[rid]))

        if workers > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, ids))
        else:
            results = [one(r) for r in ids]
        p = self.layout.n_features
        rows = np.array([r[0] for r in results]).reshape(len(ids), p)
        totals = np.array([r[1] for r in results])
        return EmbeddingMatrix(rows, totals, self.layout, tuple(ids), (kind,) * len(ids))

    # -- persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {"schema": self.schema.to_dict(), "config": self.config.to_dict(),
                "standardizer": self.standardizer.to_dict(),
                "bandwidths": dict(self.bandwidths), "orf_seeds": dict(self.orf_seeds)}

    @classmethod
    def from_dict(cls, d) -> "Featurizer":
        return cls(Schema.from_dict(d["schema"]), FeaturizerConfig.from_dict(d["config"]),
                   Standardizer.from_dict(d["standardizer"]),
                   {k: float(v) for k, v in d["bandwidths"].items()},
                   {k: int(v) for k, v in d["orf_seeds"].items()})
