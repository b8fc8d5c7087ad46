"""Command-line pipeline driver.

Subcommands run one stage each and read the previous stage's outputs from
the configured output directory; ``all`` runs every stage in dependency
order. Each stage writes a manifest with input/output hashes so reruns
can be checked for byte-level reproducibility.

Exit codes: 0 success, 1 usage problem, 2 data problem, 3 endpoint problem.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from collections import Counter, defaultdict
from importlib import resources
from pathlib import Path

from . import __version__
from .agreement import check_design, load_scores, write_agreement_report
from .annotate import (
    TAXONOMY,
    aggregate_engagement,
    annotate_corpus,
    read_annotations_jsonl,
    read_engagement_csv,
    write_annotations_jsonl,
    write_engagement_csv,
)
from .biblio import (
    build_subset,
    harmonize,
    load_bib_table,
    read_model_rows,
    write_model_rows,
)
from .collab import aggregate_collab, read_collab_csv, write_collab_csv
from .config import Config, load_config
from .descriptives import (
    QUARTILE_CLASSES,
    category_ai_summary,
    keyword_frequency,
    write_ai_by_category,
    write_equitability_by_year,
    write_keyword_freq,
)
from .errors import (
    DataError,
    EmptyInput,
    EndpointError,
    EndpointUnavailable,
    JimpactError,
    UsageError,
)
from .ingest import journal_key, read_records, stream_corpus, write_records
from .llm_cache import ResponseCache
from .llm_client import LlmClient
from .lmm import fit_reml, problem_from_rows, robust_se, wald_summary
from .manifest import StageTimer, write_manifest

FIT_TARGETS = ("impact_factor", "total_cites_3y", "quartile_score")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="TOML config file")
    common.add_argument("--records-out", help="records output path (ingest)")
    common.add_argument("--cache-dir", help="endpoint response cache directory")
    common.add_argument("--endpoint-url", help="chat endpoint base URL")
    common.add_argument("--model", help="model name sent to the endpoint")
    common.add_argument("--max-inflight", type=int, help="parallel endpoint requests")
    common.add_argument("--target", choices=FIT_TARGETS, help="outcome to fit")
    common.add_argument("--year", type=int, help="target year")
    common.add_argument("--significant-only", action="store_true",
                        help="keep only rows with p < 0.05 in fit output")
    common.add_argument("--top-k", type=int, help="keyword table size")

    parser = _Parser(prog="jimpact", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="stage", required=True)
    for name, doc in [
        ("ingest", "parse the XML corpus into a records file"),
        ("collab", "aggregate collaboration features per journal-year"),
        ("annotate", "run the three-stage annotation pipeline"),
        ("features", "aggregate engagement features per journal-year"),
        ("join", "harmonize bibliometric tables and build modeling rows"),
        ("fit", "fit mixed models and write summary tables"),
        ("agree", "compute inter-rater agreement statistics"),
        ("describe", "write descriptive statistics tables"),
        ("all", "run every stage in dependency order"),
    ]:
        sub.add_parser(name, parents=[common], help=doc)
    return parser


def _out_dir(cfg: Config) -> Path:
    out = Path(cfg.resolve(cfg.out_dir))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _records_path(cfg: Config, args) -> Path:
    if getattr(args, "records_out", None):
        return Path(args.records_out)
    if cfg.records_path:
        return Path(cfg.resolve(cfg.records_path))
    return _out_dir(cfg) / "records.jsonl"


def _require(value, name: str):
    if not value:
        raise UsageError(f"{name} is required (flag or config)")
    return value


# --- stages -------------------------------------------------------------------


def stage_ingest(cfg: Config, args) -> dict:
    corpus = Path(cfg.resolve(_require(cfg.corpus_dir, "paths.corpus_dir")))
    records_path = _records_path(cfg, args)
    records, n_errors = [], 0
    for report in stream_corpus(corpus):
        if report.record is None:
            n_errors += 1
            print(f"note: skipped {report.path}: {report.error}",
                  file=sys.stderr)
        else:
            records.append(report.record)
    if not records:
        raise EmptyInput(f"no parseable articles under {corpus}")
    records_path.parent.mkdir(parents=True, exist_ok=True)
    write_records(records, records_path)
    print(f"ingest: {len(records)} records, {n_errors} parse errors "
          f"-> {records_path}")
    return {"inputs": [corpus], "outputs": [records_path],
            "extra": {"n_records": len(records), "n_parse_errors": n_errors}}


def stage_collab(cfg: Config, args) -> dict:
    records_path = _records_path(cfg, args)
    records = read_records(records_path)
    table = aggregate_collab(records)
    out = _out_dir(cfg) / "collab_features.csv"
    write_collab_csv(table, out)
    print(f"collab: {len(table)} journal-year cells -> {out}")
    return {"inputs": [records_path], "outputs": [out],
            "extra": {"n_cells": len(table)}}


def _endpoint_client(cfg: Config, args) -> LlmClient:
    base_url = _require(getattr(args, "endpoint_url", None) or cfg.base_url,
                        "endpoint.base_url")
    model = _require(getattr(args, "model", None) or cfg.model,
                     "endpoint.model")
    return LlmClient(base_url, model, timeout=cfg.timeout,
                     max_attempts=cfg.max_attempts)


def stage_annotate(cfg: Config, args) -> dict:
    records_path = _records_path(cfg, args)
    records = read_records(records_path)
    client = _endpoint_client(cfg, args)
    cache_dir = (getattr(args, "cache_dir", None) or
                 (cfg.resolve(cfg.cache_dir) if cfg.cache_dir else
                  _out_dir(cfg) / "cache"))
    cache = ResponseCache(cache_dir)
    max_inflight = getattr(args, "max_inflight", None) or cfg.max_inflight
    queue_path = _out_dir(cfg) / "retry_queue.jsonl"
    results, pending = annotate_corpus(
        records, client, cache, max_inflight=max_inflight,
        retry_queue_path=queue_path)
    out = _out_dir(cfg) / "annotations.jsonl"
    write_annotations_jsonl(results, out)
    for article_id, error in pending:
        print(f"note: parked {article_id}: {error}", file=sys.stderr)
    # articles parked and not a single round-trip succeeded: endpoint is down
    if pending and client.n_calls == 0:
        raise EndpointUnavailable(
            f"all {len(pending)} annotation requests failed; "
            f"queue written to {queue_path}")
    print(f"annotate: {len(results)} annotated, {len(pending)} parked, "
          f"{client.n_calls} endpoint calls -> {out}")
    return {"inputs": [records_path], "outputs": [out],
            "extra": {"endpoint_calls": client.n_calls,
                      "endpoint_attempts": client.n_attempts,
                      "cache_hits": cache.hits,
                      "cache_misses": cache.misses,
                      "n_annotated": len(results),
                      "n_pending": len(pending)}}


def stage_features(cfg: Config, args) -> dict:
    records_path = _records_path(cfg, args)
    ann_path = _out_dir(cfg) / "annotations.jsonl"
    records = read_records(records_path)
    annotations = read_annotations_jsonl(ann_path)
    features, no_abstract = aggregate_engagement(records, annotations)
    out = _out_dir(cfg) / "engagement.csv"
    write_engagement_csv(features, no_abstract, out)
    print(f"features: {len(features)} journal-year cells -> {out}")
    return {"inputs": [records_path, ann_path], "outputs": [out],
            "extra": {"n_cells": len(features)}}


def _load_unified(cfg: Config):
    if not cfg.bib_sources:
        raise UsageError("config declares no [[bib.sources]] tables")
    sources, paths = [], []
    for src in cfg.bib_sources:
        path = cfg.resolve(src.path)
        paths.append(path)
        sources.append((src.name,
                        load_bib_table(path, src.columns,
                                       default_year=src.default_year)))
    return harmonize(sources), paths


def stage_join(cfg: Config, args) -> dict:
    unified, bib_paths = _load_unified(cfg)
    for jkey, year, field_name, kept, dropped in unified.conflicts:
        print(f"note: conflict on {field_name} for {jkey}/{year}: "
              f"kept {kept}, ignored {dropped}", file=sys.stderr)
    collab_path = _out_dir(cfg) / "collab_features.csv"
    engagement_path = _out_dir(cfg) / "engagement.csv"
    collab_table = read_collab_csv(collab_path)
    engagement_table = read_engagement_csv(engagement_path)
    years = [args.year] if getattr(args, "year", None) else cfg.target_years
    outputs = []
    n_rows = {}
    for year in years:
        rows = build_subset(unified, collab_table, engagement_table,
                            int(year), lags=cfg.lags)
        out = _out_dir(cfg) / f"model_rows_{year}.csv"
        write_model_rows(rows, out, lags=cfg.lags)
        outputs.append(out)
        n_rows[str(year)] = len(rows)
        print(f"join: {len(rows)} journals at target {year} -> {out}")
    return {"inputs": bib_paths + [collab_path, engagement_path],
            "outputs": outputs,
            "extra": {"rows_per_year": n_rows,
                      "n_conflicts": len(unified.conflicts),
                      "n_fuzzy_joins": len(unified.fuzzy_joins)}}


def _zscore_columns(problem):
    import numpy as np

    X = problem.X.copy()
    for j in range(1, X.shape[1]):
        col = X[:, j]
        sd = col.std(ddof=0)
        if sd > 0:
            X[:, j] = (col - col.mean()) / sd
    return type(problem)(y=problem.y, X=X, groups=problem.groups,
                         column_names=problem.column_names)


def stage_fit(cfg: Config, args) -> dict:
    targets = [args.target] if getattr(args, "target", None) else cfg.fit_targets
    for t in targets:
        if t not in FIT_TARGETS:
            raise UsageError(f"unknown fit target {t!r}")
    years = [args.year] if getattr(args, "year", None) else cfg.target_years
    significant_only = bool(getattr(args, "significant_only", False)
                            or cfg.significant_only)
    inputs, outputs, stats = [], [], {}
    for year in years:
        rows_path = _out_dir(cfg) / f"model_rows_{year}.csv"
        inputs.append(rows_path)
        rows, cov_cols = read_model_rows(rows_path)
        covariates = cfg.fit_covariates or cov_cols
        for target in targets:
            problem, dropped = problem_from_rows(rows, target, covariates)
            if cfg.zscore:
                problem = _zscore_columns(problem)
            fit = fit_reml(problem)
            fit.se_robust = robust_se(problem, fit)
            summary = wald_summary(fit)
            if significant_only:
                summary = [r for r in summary if r.p_value < 0.05]
            out = _out_dir(cfg) / f"lmm_summary_{target}_{year}.csv"
            _write_summary(summary, target, out)
            outputs.append(out)
            stats[f"{target}_{year}"] = {
                "n": problem.n_obs, "dropped": dropped,
                "groups": problem.n_groups,
                "tau2": fit.tau2, "sigma2": fit.sigma2,
                "boundary": fit.boundary, "converged": fit.converged,
            }
            print(f"fit {target} @ {year}: n={problem.n_obs} "
                  f"groups={problem.n_groups} tau2={fit.tau2:.4g} "
                  f"sigma2={fit.sigma2:.4g} -> {out}")
    return {"inputs": inputs, "outputs": outputs, "extra": {"fits": stats}}


def _write_summary(summary, target: str, path: Path):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["Target", "Variable", "Coef", "StdErr",
                    "CI_L", "CI_H", "P", "Signif"])
        for row in summary:
            w.writerow([target, row.variable, f"{row.coef:.6f}",
                        f"{row.se:.6f}", f"{row.ci_low:.6f}",
                        f"{row.ci_high:.6f}", f"{row.p_value:.6g}",
                        row.stars])


def _load_design(cfg: Config) -> dict:
    if cfg.design_path:
        return json.loads(Path(cfg.resolve(cfg.design_path))
                          .read_text(encoding="utf-8"))
    ref = resources.files("jimpact").joinpath("assets/eval_design.json")
    return json.loads(ref.read_text(encoding="utf-8"))


def stage_agree(cfg: Config, args) -> dict:
    eval_path = cfg.resolve(_require(cfg.human_eval_path, "agree.human_eval"))
    scores = load_scores(eval_path)
    design = _load_design(cfg)
    mismatches = check_design(scores, design)
    for note in mismatches:
        print(f"note: design mismatch: {note}", file=sys.stderr)
    out = _out_dir(cfg) / "agreement_report.csv"
    write_agreement_report(scores, out)
    print(f"agree: {len(scores)} ratings -> {out}")
    return {"inputs": [eval_path], "outputs": [out],
            "extra": {"n_scores": len(scores),
                      "design_mismatches": mismatches}}


def _category_slug(category: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", category.lower()).strip("_")
    return slug or "uncategorized"


def stage_describe(cfg: Config, args) -> dict:
    out_dir = _out_dir(cfg)
    unified, bib_paths = _load_unified(cfg)
    top_k = getattr(args, "top_k", None) or cfg.top_k

    # quartile composition per year, over journals that report a quartile
    year_counts: dict = defaultdict(lambda: {q: 0 for q in QUARTILE_CLASSES})
    categories: dict = {}
    for (jkey, year), cell in unified.cells.items():
        q = cell.values.get("quartile")
        if q is not None:
            year_counts[year][q] += 1
        categories.setdefault(jkey, cell.values.get("subject_category", ""))
    eq_path = out_dir / "equitability_by_year.csv"
    write_equitability_by_year(dict(year_counts), eq_path)

    engagement_path = out_dir / "engagement.csv"
    engagement_table = read_engagement_csv(engagement_path)
    rate_rows = [
        {"category": categories.get(row.journal_key, ""),
         "year": row.year, "rate": row.engagement_rate}
        for row in engagement_table.values()
        if categories.get(row.journal_key, "")
    ]
    cat_path = out_dir / "ai_by_category.csv"
    write_ai_by_category(category_ai_summary(rate_rows), cat_path)

    # validated keywords per subject category
    records_path = _records_path(cfg, args)
    ann_path = out_dir / "annotations.jsonl"
    records = read_records(records_path)
    annotations = read_annotations_jsonl(ann_path)
    key_by_article = {r.article_id: journal_key(r) for r in records}
    words_by_category: dict = defaultdict(Counter)
    for ann in annotations:
        category = categories.get(key_by_article.get(ann.article_id, ""), "")
        if not category:
            continue
        for word in ann.validated_keywords:
            words_by_category[category][word] += 1
    keyword_paths = []
    for category in sorted(words_by_category):
        freq = keyword_frequency(words_by_category[category])
        path = out_dir / f"keyword_freq_{_category_slug(category)}.csv"
        write_keyword_freq(freq, path, top_k=top_k)
        keyword_paths.append(path)

    print(f"describe: {len(year_counts)} years, "
          f"{len(keyword_paths)} keyword tables -> {out_dir}")
    return {"inputs": bib_paths + [engagement_path, ann_path, records_path],
            "outputs": [eq_path, cat_path] + keyword_paths,
            "extra": {"n_categories": len(words_by_category)}}


_STAGES = {
    "ingest": stage_ingest,
    "collab": stage_collab,
    "annotate": stage_annotate,
    "features": stage_features,
    "join": stage_join,
    "fit": stage_fit,
    "agree": stage_agree,
    "describe": stage_describe,
}

_ALL_ORDER = ("ingest", "collab", "annotate", "features", "join", "fit",
              "agree", "describe")


def _run_stage(name: str, cfg: Config, args):
    with StageTimer() as timer:
        result = _STAGES[name](cfg, args)
    write_manifest(
        _out_dir(cfg), name,
        inputs=result["inputs"], outputs=result["outputs"],
        config_hash=cfg.config_hash(), elapsed=timer.elapsed,
        extra=result.get("extra"))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.stage == "all":
            for name in _ALL_ORDER:
                if name == "agree" and not cfg.human_eval_path:
                    print("note: no human_eval configured; skipping agree",
                          file=sys.stderr)
                    continue
                _run_stage(name, cfg, args)
        else:
            _run_stage(args.stage, cfg, args)
        return 0
    except UsageError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except EndpointError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except JimpactError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
