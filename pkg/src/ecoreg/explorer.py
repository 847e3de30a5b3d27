"""Which feature groups predict the outcome?

Each declared variable and interaction gets its own model, refit from
scratch on just that group's columns and scored by cross-validated deviance.
Categorical groups also yield "square plot" points: national two-party
share against participation for every level, sized by population.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import Microdata, Schema
from .errors import NotCategorical
from .featurizer import Featurizer, FeaturizerConfig, interaction_name
from .inference import LevelClause, SubgroupQuery, estimate_subgroups, two_party
from .solver import DesignProblem, ModelFit, fit_cv, fraction_deviance_explained

__all__ = [
    "FeatureSet",
    "GroupRun",
    "SquarePlotPoint",
    "enumerate_feature_sets",
    "run_exploration",
    "format_ranking",
    "write_ranking_csv",
    "square_plot_data",
    "write_square_csv",
]


@dataclass(frozen=True)
class FeatureSet:
    name: str
    groups: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class GroupRun:
    feature_set: FeatureSet
    cv_deviance: float
    cv_se: float
    frac_deviance: float
    n_active: int
    converged: bool
    fit: ModelFit


@dataclass(frozen=True)
class SquarePlotPoint:
    category_level: str
    share_B_two_party: float
    participation_rate: float
    bubble_size: float


def enumerate_feature_sets(schema: Schema, config: FeaturizerConfig | None = None) -> list[FeatureSet]:
    """One set per variable, then one per interaction pair (if interactions are on)."""
    config = config or FeaturizerConfig()
    sets = [FeatureSet(v.name, (v.name,)) for v in schema.variables]
    if config.include_interactions:
        for p, q in schema.interactions:
            name = interaction_name(p, q)
            sets.append(FeatureSet(name, (name,)))
    return sets


def run_exploration(problem: DesignProblem, feature_sets: Sequence[FeatureSet],
                    alpha_grid=(0.05, 0.5, 1.0), n_lambda: int = 100,
                    lambda_min_ratio: float | None = None, n_folds: int = 10, seed: int = 0,
                    workers: int = 1, **solver_kw) -> list[GroupRun]:
    """Cross-validate a restricted model per feature set, ranked by CV deviance.

    All sets share the fold seed, so a duplicated set scores identically.
    Ties are broken by set name.
    """

    def one(fs):
        sub = problem.restrict(fs.groups)
        fit = fit_cv(sub, alpha_grid, n_lambda, lambda_min_ratio, n_folds, seed, **solver_kw)
        best = min(fit.cv_table, key=lambda e: e.mean_deviance)
        return GroupRun(fs, best.mean_deviance, best.se, fraction_deviance_explained(fit, sub),
                        fit.nonzero_groups, all(e.converged for e in fit.cv_table), fit)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(one, feature_sets))
    else:
        runs = [one(fs) for fs in feature_sets]
    return sorted(runs, key=lambda r: (r.cv_deviance, r.feature_set.name))


def format_ranking(runs: Sequence[GroupRun], top_k: int = 25) -> str:
    """Plain-text ranking table: rank, feature, deviance, frac.deviance."""
    lines = [f"{'':>4} {'feature':<30} {'deviance':>10} {'frac.deviance':>14}"]
    for i, r in enumerate(runs[:top_k], 1):
        lines.append(f"{i:>4} {r.feature_set.name:<30} {r.cv_deviance:>10.4f} "
                     f"{r.frac_deviance:>14.2f}")
    return "\n".join(lines)


def write_ranking_csv(runs: Sequence[GroupRun], path, top_k: int = 25):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "deviance", "frac_deviance", "n_active"])
        for i, r in enumerate(runs[:top_k], 1):
            w.writerow([i, r.feature_set.name, repr(r.cv_deviance), repr(r.frac_deviance),
                        r.n_active])


def _level_queries(schema: Schema, variable: str) -> list[SubgroupQuery]:
    if ":" in variable:
        p, q = variable.split(":", 1)
        specs = [schema[p], schema[q]]
    else:
        specs = [schema[variable]]
    for s in specs:
        if not s.is_categorical:
            raise NotCategorical(f"{s.name} is not categorical")
    if len(specs) == 1:
        s = specs[0]
        return [SubgroupQuery(lv, (LevelClause(s.name, (lv,)),)) for lv in s.levels]
    a, b = specs
    return [SubgroupQuery(f"{la} & {lb}", (LevelClause(a.name, (la,)), LevelClause(b.name, (lb,))))
            for la in a.levels for lb in b.levels]


def square_plot_data(fit: ModelFit, featurizer: Featurizer, data: Microdata, variable: str,
                     top_k: int | None = 12, workers: int = 1) -> list[SquarePlotPoint]:
    """National (share_B, participation, weight) per level of a categorical variable.

    ``variable`` is a categorical variable name or ``"p:q"`` for a pair of
    categoricals.  With ``top_k`` only the most populous levels are kept
    (in declared order); levels nobody has are dropped.
    """
    queries = _level_queries(data.schema, variable)
    est = estimate_subgroups(fit, featurizer, data, queries, workers)
    counts, weights = est.aggregate()
    keep = [j for j in range(len(queries)) if weights[j] > 0]
    if top_k is not None and len(keep) > top_k:
        ranked = sorted(keep, key=lambda j: (-weights[j], j))[:top_k]
        keep = sorted(ranked)
    points = []
    for j in keep:
        _, b, part = two_party(counts[j])
        points.append(SquarePlotPoint(queries[j].name, float(b), float(part), float(weights[j])))
    return points


def write_square_csv(points: Sequence[SquarePlotPoint], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "share_B", "participation", "weight"])
        for p in points:
            w.writerow([p.category_level, repr(p.share_B_two_party), repr(p.participation_rate),
                        repr(p.bubble_size)])
