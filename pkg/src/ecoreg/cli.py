"""Command-line pipeline: ``ecoreg <command> --config run.toml``.

Commands communicate only through files in the output directory:

    synth      synthetic records/outcomes/schema from a spec file
    featurize  embedding.bin and regions.csv
    fit        fit.bin, cv_table.csv, fit_summary.json
    predict    exit-poll tables, gender gap and fit scatter CSVs
    explore    exploration_ranking.csv and square_<variable>.csv
    report     report.txt summarizing the artifacts

Every command also writes ``manifest_<command>.json``.  Exit status is 0 on
success, 2 on invalid input and 1 on any other error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import scipy

from . import __version__
from . import io as eio
from .data_model import RowKind
from .errors import EcoregError, ValidationError
from .explorer import (enumerate_feature_sets, format_ranking, run_exploration,
                       square_plot_data, write_ranking_csv, write_square_csv)
from .featurizer import FeaturizerConfig
from .inference import (SubgroupQuery, estimate_subgroups, exit_poll_table, fit_scatter,
                        gender_gap, scatter_r2, write_exit_poll_csv, write_gender_gap_csv,
                        write_scatter_csv, write_sidecar)
from .solver import DesignProblem, fit_cv, fraction_deviance_explained

EMBEDDING_FILE = "embedding.bin"
REGIONS_FILE = "regions.csv"
FIT_FILE = "fit.bin"


@dataclass
class TableSpec:
    name: str
    queries: list[tuple[str, str]]
    partition: bool = False


@dataclass
class RunConfig:
    seed: int
    records: Path | None = None
    schema: Path | None = None
    outcomes: Path | None = None
    crosswalk: Path | None = None
    exitpoll: Path | None = None
    region_states: Path | None = None
    output_dir: Path = Path("out")
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    alpha_grid: tuple[float, ...] = (0.05, 0.5, 1.0)
    n_lambda: int = 100
    lambda_min_ratio: float | None = None
    n_folds: int = 10
    use_1se: bool = False
    exit_poll_weight: float = 1.0
    default_participation: float | None = None
    tables: list[TableSpec] = field(default_factory=list)
    levels: tuple[str, ...] = ("national",)
    gender_gap: tuple[str, str] | None = None
    low_support_floor: float = 10.0
    explore_top_k: int = 25
    square_variables: tuple[str, ...] = ()
    square_top_k: int = 12
    raw: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, seed=None, output_dir=None) -> "RunConfig":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        base = Path(path).resolve().parent
        if seed is not None:
            raw["seed"] = seed
        if "seed" not in raw:
            raise ValidationError("config needs a seed")
        paths = raw.get("paths", {})

        def resolve(key):
            v = paths.get(key)
            return None if v is None else (base / v)

        feat = dict(raw.get("featurizer", {}))
        feat["seed"] = raw["seed"]
        solver = raw.get("solver", {})
        predict = raw.get("predict", {})
        explore = raw.get("explore", {})
        tables = [TableSpec(t["name"], [(q["name"], q["query"]) for q in t["queries"]],
                            bool(t.get("partition", False))) for t in raw.get("tables", [])]
        out = Path(output_dir) if output_dir is not None else resolve("output_dir") or base / "out"
        gap = predict.get("gender_gap")
        return cls(
            seed=int(raw["seed"]),
            records=resolve("records"), schema=resolve("schema"), outcomes=resolve("outcomes"),
            crosswalk=resolve("crosswalk"), exitpoll=resolve("exitpoll"),
            region_states=resolve("region_states"), output_dir=out,
            featurizer=FeaturizerConfig.from_dict(feat),
            alpha_grid=tuple(solver.get("alpha_grid", (0.05, 0.5, 1.0))),
            n_lambda=int(solver.get("n_lambda", 100)),
            lambda_min_ratio=solver.get("lambda_min_ratio"),
            n_folds=int(solver.get("n_folds", 10)),
            use_1se=bool(solver.get("use_1se", False)),
            exit_poll_weight=float(solver.get("exit_poll_weight", 1.0)),
            default_participation=predict.get("default_participation"),
            tables=tables,
            levels=tuple(predict.get("levels", ("national",))),
            gender_gap=None if gap is None else (gap[0], gap[1]),
            low_support_floor=float(predict.get("low_support_floor", 10.0)),
            explore_top_k=int(explore.get("top_k", 25)),
            square_variables=tuple(explore.get("square_variables", ())),
            square_top_k=int(explore.get("square_top_k", 12)),
            raw=raw,
        )

    def need(self, *keys):
        for k in keys:
            p = getattr(self, k)
            if p is None:
                raise ValidationError(f"config is missing paths.{k}")
            if not Path(p).exists():
                raise ValidationError(f"{k} file not found: {p}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(cfg: RunConfig, command: str, inputs, outputs):
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(
            json.dumps(cfg.raw, sort_keys=True, default=str).encode()).hexdigest(),
        "seed": cfg.seed,
        "inputs": {Path(p).name: _sha256(p) for p in inputs if p is not None and Path(p).exists()},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
        "versions": {"ecoreg": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    write_sidecar(cfg.output_dir / f"manifest_{command}.json", manifest)


def _load_microdata(cfg):
    cfg.need("records", "schema")
    schema = eio.read_schema(cfg.schema)
    return eio.load_microdata(cfg.records, schema)


# -- commands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, spec_path, workers=1):
    """Write records.csv, schema.json, outcomes.csv and truth.json from a spec file."""
    with open(spec_path, "rb") as fh:
        raw = tomllib.load(fh)
    raw.setdefault("seed", cfg.seed)
    spec = eio.SyntheticSpec.from_dict(raw)
    data = eio.generate_synthetic(spec)
    out = cfg.output_dir
    files = [out / "records.csv", out / "schema.json", out / "outcomes.csv", out / "truth.json"]
    eio.write_records(data.microdata, files[0])
    eio.write_schema(spec.schema, files[1])
    eio.write_outcomes(data.table, files[2])
    write_sidecar(files[3], {"active_groups": data.active_groups,
                             "intercepts": data.intercepts.tolist(),
                             "beta": data.beta.tolist(),
                             "layout": data.featurizer.layout.to_list()})
    _write_manifest(cfg, "synth", [spec_path], files)
    print(f"synth: {len(data.microdata)} records in {spec.n_regions} regions")


def cmd_featurize(cfg: RunConfig, workers=1):
    data = _load_microdata(cfg)
    cfg.need("outcomes")
    from .featurizer import Featurizer

    feat = Featurizer.fit(data, cfg.featurizer)
    county = eio.read_outcomes(cfg.outcomes)
    if cfg.crosswalk is not None:
        cfg.need("crosswalk")
        table = eio.merge_outcomes(county, eio.read_crosswalk(cfg.crosswalk))
    else:
        table = eio.merge_outcomes(county, eio.Crosswalk.identity(list(county)))
    regions = set(data.region_ids.tolist())
    missing = [r.row_id for r in table.rows if r.row_id not in regions]
    if missing:
        raise ValidationError(f"regions without microdata: {missing[:5]}")
    index = data.region_index()
    emb = feat.embed(data, {r.row_id: index[r.row_id] for r in table.rows}, workers=workers)
    inputs = [cfg.records, cfg.schema, cfg.outcomes, cfg.crosswalk]
    if cfg.exitpoll is not None:
        cfg.need("exitpoll", "region_states")
        polls = eio.read_exitpoll(cfg.exitpoll, data.schema)
        states = eio.read_region_states(cfg.region_states)
        counts = table.counts()
        default = cfg.default_participation
        if default is None:
            default = float(counts[:, :2].sum() / counts.sum())
        aug_emb, aug_table = eio.build_augmentation_rows(polls, data, feat, states, default)
        emb = emb.append(aug_emb)
        table = table.extend(aug_table.rows)
        inputs += [cfg.exitpoll, cfg.region_states]
    out = cfg.output_dir
    eio.save_embeddings(emb, feat, out / EMBEDDING_FILE, table)
    eio.write_region_table(table, out / REGIONS_FILE)
    _write_manifest(cfg, "featurize", inputs, [out / EMBEDDING_FILE, out / REGIONS_FILE])
    print(f"featurize: n={emb.shape[0]} p={emb.shape[1]} groups={len(emb.layout)}")


def _problem(cfg):
    emb, feat, table, _ = eio.load_embeddings(cfg.output_dir / EMBEDDING_FILE)
    return DesignProblem.from_embeddings(emb, table, cfg.exit_poll_weight), feat


def cmd_fit(cfg: RunConfig, workers=1):
    problem, _ = _problem(cfg)
    fit = fit_cv(problem, cfg.alpha_grid, cfg.n_lambda, cfg.lambda_min_ratio, cfg.n_folds,
                 cfg.seed, workers=workers, use_1se=cfg.use_1se)
    out = cfg.output_dir
    eio.save_fit(fit, out / FIT_FILE, config=cfg.raw, seed=cfg.seed)
    with open(out / "cv_table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "lambda", "mean_deviance", "se", "converged"])
        for e in fit.cv_table:
            w.writerow([repr(e.alpha), repr(e.lam), repr(e.mean_deviance), repr(e.se),
                        int(e.converged)])
    summary = {"alpha": fit.alpha, "lambda": fit.lam,
               "lambda_1se": fit.metadata.get("lambda_1se"),
               "nonzero_groups": fit.nonzero_groups, "n_groups": len(fit.layout),
               "nonzero_features": fit.nonzero_features, "n_features": fit.layout.n_features,
               "active_groups": fit.active_groups,
               "frac_deviance": fraction_deviance_explained(fit, problem),
               "converged": fit.converged}
    write_sidecar(out / "fit_summary.json", summary)
    _write_manifest(cfg, "fit", [out / EMBEDDING_FILE],
                    [out / FIT_FILE, out / "cv_table.csv", out / "fit_summary.json"])
    print(f"fit: alpha={fit.alpha:g} lambda={fit.lam:.4g} active groups "
          f"{fit.nonzero_groups}/{len(fit.layout)}, features "
          f"{fit.nonzero_features}/{fit.layout.n_features}")


def cmd_predict(cfg: RunConfig, workers=1):
    data = _load_microdata(cfg)
    out = cfg.output_dir
    problem, feat = _problem(cfg)
    fit = eio.load_fit(out / FIT_FILE)
    states = eio.read_region_states(cfg.region_states) if cfg.region_states else None
    outputs = []
    fit_hash = _sha256(out / FIT_FILE)
    for spec in cfg.tables:
        queries = [SubgroupQuery.parse(n, q, data.schema) for n, q in spec.queries]
        est = estimate_subgroups(fit, feat, data, queries, workers)
        for level in cfg.levels:
            rows = exit_poll_table(fit, feat, data, queries, level, spec.partition, states,
                                   cfg.low_support_floor, estimates=est)
            path = out / f"exit_poll_{spec.name}_{level}.csv"
            write_exit_poll_csv(rows, path)
            side = path.with_suffix(".json")
            write_sidecar(side, {"model_hash": fit_hash, "seed": cfg.seed, "table": spec.name,
                                 "level": level, "partition": spec.partition,
                                 "queries": {q.name: q.expression for q in queries},
                                 "low_support": [[r.unit_id, r.group] for r in rows
                                                 if r.low_support],
                                 "config": cfg.raw})
            outputs += [path, side]
    if cfg.gender_gap is not None:
        q1, q2 = (SubgroupQuery.parse(f"gap_{i}", q, data.schema)
                  for i, q in enumerate(cfg.gender_gap, 1))
        gap = gender_gap(fit, feat, data, q1, q2, cfg.low_support_floor, workers)
        write_gender_gap_csv(gap, out / "gender_gap.csv")
        outputs.append(out / "gender_gap.csv")
    points = fit_scatter(fit, problem)
    write_scatter_csv(points, out / "fit_scatter.csv")
    outputs.append(out / "fit_scatter.csv")
    _write_manifest(cfg, "predict", [cfg.records, cfg.schema, out / FIT_FILE, out / EMBEDDING_FILE],
                    outputs)
    print(f"predict: wrote {len(outputs)} files; fit scatter R^2 = {scatter_r2(points):.3f}")


def cmd_explore(cfg: RunConfig, workers=1):
    out = cfg.output_dir
    problem, feat = _problem(cfg)
    sets = enumerate_feature_sets(feat.schema, feat.config)
    runs = run_exploration(problem, sets, cfg.alpha_grid, cfg.n_lambda, cfg.lambda_min_ratio,
                           cfg.n_folds, cfg.seed, workers)
    write_ranking_csv(runs, out / "exploration_ranking.csv", cfg.explore_top_k)
    outputs = [out / "exploration_ranking.csv"]
    if cfg.square_variables:
        data = _load_microdata(cfg)
        by_name = {r.feature_set.name: r for r in runs}
        unknown = [v for v in cfg.square_variables if v not in by_name]
        if unknown:
            raise ValidationError(f"square_variables not among the feature sets: {unknown}")
        for var in cfg.square_variables:
            points = square_plot_data(by_name[var].fit, feat, data, var, cfg.square_top_k,
                                      workers)
            path = out / f"square_{var.replace(':', '_')}.csv"
            write_square_csv(points, path)
            outputs.append(path)
    _write_manifest(cfg, "explore", [out / EMBEDDING_FILE], outputs)
    print(format_ranking(runs, cfg.explore_top_k))


def cmd_report(cfg: RunConfig, workers=1):
    out = cfg.output_dir
    lines = []
    if (out / EMBEDDING_FILE).exists():
        emb, feat, table, _ = eio.load_embeddings(out / EMBEDDING_FILE)
        n_exit = sum(k == RowKind.EXIT_POLL for k in emb.kinds)
        lines.append(f"embedding: {emb.shape[0]} rows ({n_exit} exit-poll), "
                     f"{emb.shape[1]} features in {len(emb.layout)} groups")
    if (out / FIT_FILE).exists():
        fit = eio.load_fit(out / FIT_FILE)
        lines.append(f"fit: alpha={fit.alpha!r} lambda={fit.lam!r}")
        lines.append(f"active groups: {fit.nonzero_groups} of {len(fit.layout)}; "
                     f"nonzero features {fit.nonzero_features} of {fit.layout.n_features}")
        lines.append("active: " + ", ".join(fit.active_groups))
    if not lines:
        raise ValidationError(f"no artifacts in {out}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    _write_manifest(cfg, "report", [], [out / "report.txt"])
    print(text, end="")


COMMANDS = {"featurize": cmd_featurize, "fit": cmd_fit, "predict": cmd_predict,
            "explore": cmd_explore, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecoreg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("featurize", "fit", "predict", "explore", "synth", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--output-dir", default=None)
        if name == "synth":
            p.add_argument("--spec", required=True, help="TOML synthetic-data spec")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.seed, args.output_dir)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        workers = max(1, int(args.workers))
        if args.command == "synth":
            cmd_synth(cfg, args.spec, workers)
        else:
            COMMANDS[args.command](cfg, workers)
    except (ValidationError, tomllib.TOMLDecodeError) as exc:
        print(f"ecoreg {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except EcoregError as exc:
        print(f"ecoreg {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit status 1
        print(f"ecoreg {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
