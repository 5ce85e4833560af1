"""Stage functions behind the command line: each reads upstream artifacts from
the output directory, writes its own and records a manifest with the config
hash it was produced under.

Layout under ``out``::

    prepare/   split.json  examples.npz  manifest.json
    psg/       embeddings.npz  manifest.json
    pseudo/    examples.npz  manifest.json
    train/     model.pt  history.jsonl  manifest.json
    evaluate/  report.json  report.txt  manifest.json
    ablate/    <variant>/...  comparison.csv  comparison.json
    sweep/     <axis>_<value>/...  summary.csv  summary.json

A stage whose manifest already carries the current hash is skipped unless
``force`` is set.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from .config import PipelineConfig
from .corpus import (
    DOMAINS, UserSplit, catalog_sizes, downsample_log, ingest_ratings, load_examples, prepare_examples,
    save_examples, simulate_cold_start, split_users,
)
from .errors import ConfigError, MissingArtifactError
from .evalharness import EvalReport, evaluate, merge_reports, model_scorer
from .psg import RecallEmbeddings, attach_pseudo_sequences, build_unified_graph, train_psg
from .synthetic import generate_corpus
from .trainer import config_hash, load_checkpoint, prepare_inputs, set_seed, train

logger = logging.getLogger(__name__)

STAGES = ("prepare", "train-psg", "pseudo", "train", "evaluate")
_DIRS = {"prepare": "prepare", "train-psg": "psg", "pseudo": "pseudo", "train": "train", "evaluate": "evaluate"}
# config sections each stage depends on (upstream hashes are chained in)
_SECTIONS = {
    "prepare": ("data", "corpus", "seed"),
    "train-psg": ("psg", "seed"),
    "pseudo": ("psg",),
    "train": ("model", "seed"),
    "evaluate": ("eval",),
}
_UPSTREAM = {"train-psg": "prepare", "pseudo": "train-psg", "train": "pseudo", "evaluate": "train"}
VARIANTS = ("full", "no_psg", "no_if_ds", "no_dn")


def stage_dir(out: str | Path, stage: str) -> Path:
    return Path(out) / _DIRS[stage]


def stage_hash(config: PipelineConfig, stage: str) -> str:
    d = config.to_dict()
    payload = {name: d[name] for name in _SECTIONS[stage]}
    if stage in ("train-psg", "pseudo"):
        # the recall depth is the pseudo-sequence length
        payload["T_pseudo"] = d["model"]["T_pseudo"]
    up = _UPSTREAM.get(stage)
    if up is not None:
        payload["upstream"] = stage_hash(config, up)
    return config_hash(payload)


def _manifest(out: str | Path, stage: str) -> dict | None:
    p = stage_dir(out, stage) / "manifest.json"
    return json.loads(p.read_text()) if p.exists() else None


def _write_manifest(out: str | Path, stage: str, config: PipelineConfig, files: list[str]) -> None:
    d = stage_dir(out, stage)
    payload = {"stage": stage, "config_hash": stage_hash(config, stage), "files": files}
    (d / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    (d / "config.yaml").write_text(config.to_yaml())


def require(out: str | Path, stage: str, config: PipelineConfig) -> Path:
    """Directory of a finished upstream stage produced under the same config."""
    m = _manifest(out, stage)
    if m is None:
        raise MissingArtifactError(f"missing output of `{stage}`: run the `{stage}` subcommand first")
    expected = stage_hash(config, stage)
    if m["config_hash"] != expected:
        raise ConfigError(
            f"config hash mismatch for `{stage}` ({m['config_hash']} on disk, {expected} now); "
            f"rerun `{stage}` or restore the original config"
        )
    d = stage_dir(out, stage)
    for name in m["files"]:
        if not (d / name).exists():
            raise MissingArtifactError(f"{d / name} is missing: rerun the `{stage}` subcommand")
    return d


def _up_to_date(out: str | Path, stage: str, config: PipelineConfig, force: bool) -> bool:
    if force:
        return False
    m = _manifest(out, stage)
    if m is None or m["config_hash"] != stage_hash(config, stage):
        return False
    d = stage_dir(out, stage)
    if all((d / f).exists() for f in m["files"]):
        logger.info("`%s` is up to date (hash %s)", stage, m["config_hash"])
        return True
    return False


def load_logs(config: PipelineConfig):
    if config.data.x_path:
        log_x = ingest_ratings(config.data.x_path, "X", config.data.delimiter)
        log_y = ingest_ratings(config.data.y_path, "Y", config.data.delimiter)
    else:
        log_x, log_y, _ = generate_corpus(config.data.synthetic_spec(config.seed))
    if config.corpus.density < 1:
        log_x = downsample_log(log_x, config.corpus.density, config.seed)
        log_y = downsample_log(log_y, config.corpus.density, config.seed + 1)
    return log_x, log_y


def run_prepare(config: PipelineConfig, out: str | Path, force: bool = False) -> Path:
    d = stage_dir(out, "prepare")
    if _up_to_date(out, "prepare", config, force):
        return d
    d.mkdir(parents=True, exist_ok=True)
    log_x, log_y = load_logs(config)
    c = config.corpus
    split = split_users(log_x, log_y, tuple(c.ratios), c.k_o, config.seed)
    split = simulate_cold_start(split, c.k_cs, config.seed)
    examples = prepare_examples(split, c.T)
    (d / "split.json").write_text(split.to_json())
    save_examples(d / "examples.npz", examples)
    stats = {"X": log_x.stats(), "Y": log_y.stats(), "n_examples": len(examples)}
    (d / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    _write_manifest(out, "prepare", config, ["split.json", "examples.npz", "stats.json"])
    return d


def _catalog(out: str | Path, config: PipelineConfig) -> dict[str, int]:
    src = require(out, "prepare", config)
    return catalog_sizes(UserSplit.from_json((src / "split.json").read_text()))


def run_train_psg(config: PipelineConfig, out: str | Path, force: bool = False) -> Path:
    src = require(out, "prepare", config)
    d = stage_dir(out, "train-psg")
    if _up_to_date(out, "train-psg", config, force):
        return d
    d.mkdir(parents=True, exist_ok=True)
    examples = load_examples(src / "examples.npz")
    n_items = _catalog(out, config)
    graph = build_unified_graph(examples, n_items, config.psg.visibility_policy)
    psg_cfg = config.psg.psg_config(config.seed, config.model.T_pseudo)
    train_users = [e.user_id for e in examples if e.role == "train"]
    emb = train_psg(graph, psg_cfg, train_users)
    emb.save(d / "embeddings.npz", graph)
    (d / "history.json").write_text(json.dumps(emb.meta, indent=1, sort_keys=True, default=float))
    _write_manifest(out, "train-psg", config, ["embeddings.npz"])
    return d


def run_pseudo(config: PipelineConfig, out: str | Path, force: bool = False) -> Path:
    src = require(out, "prepare", config)
    psg_dir = require(out, "train-psg", config)
    d = stage_dir(out, "pseudo")
    if _up_to_date(out, "pseudo", config, force):
        return d
    d.mkdir(parents=True, exist_ok=True)
    examples = load_examples(src / "examples.npz")
    emb, graph = RecallEmbeddings.load(psg_dir / "embeddings.npz")
    examples = attach_pseudo_sequences(examples, emb, graph, config.model.T_pseudo, config.psg.visibility_policy)
    save_examples(d / "examples.npz", examples)
    _write_manifest(out, "pseudo", config, ["examples.npz"])
    return d


def run_train(config: PipelineConfig, out: str | Path, force: bool = False) -> Path:
    src = require(out, "pseudo", config)
    d = stage_dir(out, "train")
    if _up_to_date(out, "train", config, force):
        return d
    examples = load_examples(src / "examples.npz")
    n_items = _catalog(out, config)
    run_cfg = replace(config.model, seed=config.seed)
    train(run_cfg, examples, n_items, out_dir=d)
    _write_manifest(out, "train", config, ["model.pt", "history.jsonl"])
    return d


def evaluate_checkpoint(config: PipelineConfig, out: str | Path, model_dir: Path) -> EvalReport:
    """Test-set report of a trained model, one entry per evaluation seed."""
    src = require(out, "pseudo", config)
    model, run_cfg, payload = load_checkpoint(model_dir / "model.pt")
    examples = load_examples(src / "examples.npz")
    n_items = _catalog(out, config)
    examples = prepare_inputs(run_cfg, examples, n_items, set_seed(run_cfg.seed))
    test = [e for e in examples if e.role == "test"]
    reports = [
        evaluate(model_scorer(model), test, n_items, config.eval.negatives, seed=s, k=config.eval.k,
                 metadata={"config_hash": payload["config_hash"]})
        for s in config.eval.seeds
    ]
    return merge_reports(reports)


def run_evaluate(config: PipelineConfig, out: str | Path, force: bool = False) -> Path:
    model_dir = require(out, "train", config)
    d = stage_dir(out, "evaluate")
    if _up_to_date(out, "evaluate", config, force):
        return d
    d.mkdir(parents=True, exist_ok=True)
    report = evaluate_checkpoint(config, out, model_dir)
    (d / "report.json").write_text(report.to_json())
    (d / "report.txt").write_text(report.format_table() + "\n")
    _write_manifest(out, "evaluate", config, ["report.json", "report.txt"])
    return d


def run_all(config: PipelineConfig, out: str | Path, force: bool = False) -> EvalReport:
    for fn in (run_prepare, run_train_psg, run_pseudo, run_train, run_evaluate):
        fn(config, out, force)
    return EvalReport.from_dict(json.loads((stage_dir(out, "evaluate") / "report.json").read_text()))


def variant_config(config: PipelineConfig, variant: str) -> PipelineConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    if variant == "full":
        return config
    return replace(config, model=replace(config.model, **{variant: True}))


def _train_and_score(config: PipelineConfig, out: str | Path, run_dir: Path, force: bool) -> EvalReport:
    report_path = run_dir / "report.json"
    tag = config_hash(config.to_dict())
    if not force and report_path.exists():
        payload = json.loads(report_path.read_text())
        if payload.get("metadata", {}).get("pipeline_hash") == tag:
            return EvalReport.from_dict(payload)
    src = require(out, "pseudo", config)
    examples = load_examples(src / "examples.npz")
    n_items = _catalog(out, config)
    reports = []
    for s in config.eval.seeds:
        seed_dir = run_dir / f"seed_{s}"
        res = train(replace(config.model, seed=s), examples, n_items, out_dir=seed_dir)
        run_examples = prepare_inputs(res.config, examples, n_items, set_seed(s))
        test = [e for e in run_examples if e.role == "test"]
        reports.append(evaluate(model_scorer(res.model), test, n_items, config.eval.negatives, seed=s,
                                k=config.eval.k))
    report = merge_reports(reports)
    report.metadata["pipeline_hash"] = tag
    run_dir.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json())
    (run_dir / "config.yaml").write_text(config.to_yaml())
    return report


def comparison_rows(reports: dict[str, EvalReport]) -> list[dict]:
    rows = []
    for name, rep in reports.items():
        row = {"variant": name}
        for (dom, g), c in rep.cells.items():
            for metric, mean, std in (("ndcg10", c.ndcg_mean, c.ndcg_std), ("hr10", c.hr_mean, c.hr_std)):
                row[f"{dom}_{g}_{metric}"] = None if mean is None else round(mean, 4)
                row[f"{dom}_{g}_{metric}_std"] = None if std is None else round(std, 4)
        rows.append(row)
    return rows


def _write_rows(path_stem: Path, rows: list[dict]) -> None:
    path_stem.parent.mkdir(parents=True, exist_ok=True)
    path_stem.with_suffix(".json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    keys = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys)
    w.writeheader()
    w.writerows(rows)
    path_stem.with_suffix(".csv").write_text(buf.getvalue())


def full_wins(reports: dict[str, EvalReport], variant: str) -> int:
    """How many of the four domain-averaged cells {tailed, cold-start} x
    {NDCG, HR} the full model wins or ties against ``variant``."""
    wins = 0
    for g in ("tailed", "cold_start"):
        for metric in ("ndcg", "hr"):
            full = np.mean([reports["full"].metric(d, g, metric) or 0.0 for d in DOMAINS])
            other = np.mean([reports[variant].metric(d, g, metric) or 0.0 for d in DOMAINS])
            wins += full >= other
    return int(wins)


def run_ablate(config: PipelineConfig, out: str | Path, force: bool = False,
               variants: tuple[str, ...] = VARIANTS) -> dict[str, EvalReport]:
    """Full model plus the three single-module removals, on shared upstream data."""
    root = Path(out) / "ablate"
    reports = {v: _train_and_score(variant_config(config, v), out, root / v, force) for v in variants}
    _write_rows(root / "comparison", comparison_rows(reports))
    lines = []
    for v, rep in reports.items():
        lines += [f"== {v} ==", rep.format_table(), ""]
    (root / "comparison.txt").write_text("\n".join(lines))
    return reports


SWEEP_AXES = {
    "density": ("corpus", "density"),
    "overlap": ("corpus", "k_o"),
    "T": ("model", "T"),
    "lambda_a": ("model", "lambda_a"),
    "lambda_t": ("model", "lambda_t"),
}


def sweep_point(config: PipelineConfig, axis: str, value) -> PipelineConfig:
    section, key = SWEEP_AXES[axis]
    if axis == "T":
        return replace(config, corpus=replace(config.corpus, T=int(value)), model=replace(config.model, T=int(value)))
    return replace(config, **{section: replace(getattr(config, section), **{key: value})})


def run_sweep(config: PipelineConfig, out: str | Path, force: bool = False,
              axes: tuple[str, ...] | None = None,
              runner: Callable[[PipelineConfig, Path, bool], EvalReport] | None = None) -> list[dict]:
    """One full pipeline per value of every requested axis; each point lives in
    its own output directory so points never share artifacts."""
    root = Path(out) / "sweep"
    axes = axes or tuple(a for a in SWEEP_AXES if getattr(config.sweep, a))
    rows = []
    for axis in axes:
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        for value in getattr(config.sweep, axis):
            point = sweep_point(config, axis, value).validate()
            point_dir = root / f"{axis}_{value}"
            report = (runner or run_all)(point, point_dir, force)
            row = {"axis": axis, "value": value}
            row.update({k: v for k, v in comparison_rows({"": report})[0].items() if k != "variant"})
            rows.append(row)
    _write_rows(root / "summary", rows)
    return rows
