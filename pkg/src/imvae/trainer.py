"""Training loop, seeding, checkpoints, grid search and ablation switches."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import DOMAINS, X, Y, UserExample
from .errors import ConfigError, MissingArtifactError, NumericalError
from .evalharness import Candidates, EvalReport, build_candidates, evaluate, merge_reports, model_scorer
from .model import IMVAE, ExampleArrays, ModelConfig, compute_loss
from .psg import random_pseudo_sequences

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LR_GRID = (3e-4, 4e-4, 5e-4, 6e-4, 7e-4, 8e-4)
LAMBDA_GRID = (5e-4, 1e-3, 2e-3, 3e-3, 4e-3, 5e-3)


@dataclass(frozen=True)
class RunConfig:
    d: int = 128
    batch: int = 512
    lr: float = 5e-4
    epochs: int = 100
    T: int = 20
    T_pseudo: int = 40
    heads: int = 4
    lambda_t: float = 1e-3
    lambda_a: float = 5e-3
    a: float = 0.8
    b: float = 0.8
    seed: int = 0
    no_psg: bool = False
    no_if_ds: bool = False
    no_dn: bool = False
    cross_encoder_mode: str = "attention"
    dropout: float = 0.2
    train_negatives: int = 1
    eval_negatives: int = 999
    grad_clip: float = 5.0
    mask_cold_pseudo: bool = True
    aux_for_cold_start: bool = True
    weight_decay: float = 0.0

    def validate(self, strict: bool = False) -> "RunConfig":
        """Sanity checks; ``strict`` additionally pins every searched value to
        the published grids."""
        if self.cross_encoder_mode not in ("attention", "mlp"):
            raise ConfigError(f"cross_encoder_mode must be attention or mlp, got {self.cross_encoder_mode!r}")
        for name in ("d", "batch", "epochs", "T", "T_pseudo", "heads", "train_negatives", "eval_negatives"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d % self.heads:
            raise ConfigError("d must be divisible by heads")
        if self.lambda_t < 0 or self.lambda_a < 0 or self.lr <= 0:
            raise ConfigError("lambda_t, lambda_a must be >= 0 and lr > 0")
        if strict:
            if not any(np.isclose(self.lr, g) for g in LR_GRID):
                raise ConfigError(f"lr {self.lr} not in {LR_GRID}")
            for name in ("lambda_t", "lambda_a"):
                if not any(np.isclose(getattr(self, name), g) for g in LAMBDA_GRID):
                    raise ConfigError(f"{name} {getattr(self, name)} not in {LAMBDA_GRID}")
            pinned = {"d": 128, "batch": 512, "epochs": 100, "T": 20, "T_pseudo": 40, "heads": 4, "a": 0.8, "b": 0.8}
            for name, value in pinned.items():
                if getattr(self, name) != value:
                    raise ConfigError(f"{name} must be {value} under the published settings")
        return self

    @property
    def effective_lambda_t(self) -> float:
        return 0.0 if self.no_if_ds else self.lambda_t

    @property
    def effective_lambda_a(self) -> float:
        return 0.0 if self.no_dn else self.lambda_a

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**payload)


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Seeds:
    """Independent sub-seeds derived from one run seed via ``SeedSequence``.

    Order of ``generate_state`` words: init, shuffle, noise, negatives,
    evaluation, pseudo.
    """

    run: int
    init: int
    shuffle: int
    noise: int
    negatives: int
    evaluation: int
    pseudo: int


def set_seed(seed: int) -> Seeds:
    words = np.random.SeedSequence(seed).generate_state(6)
    seeds = Seeds(seed, *(int(w) for w in words))
    torch.manual_seed(seeds.init)
    np.random.seed(seeds.init)
    return seeds


@dataclass
class TrainResult:
    model: IMVAE
    history: list[dict]
    best_epoch: int
    best_metric: float
    config: RunConfig
    checkpoint_path: Path | None = None


def model_config_for(config: RunConfig, n_items: dict[str, int]) -> ModelConfig:
    return ModelConfig(
        n_items_x=n_items[X],
        n_items_y=n_items[Y],
        d=config.d,
        T=config.T,
        T_pseudo=config.T_pseudo,
        heads=config.heads,
        dropout=config.dropout,
        cross_encoder_mode=config.cross_encoder_mode,
        mask_cold_pseudo=config.mask_cold_pseudo,
        aux_for_cold_start=config.aux_for_cold_start and not config.no_if_ds,
    )


def build_model(config: RunConfig, n_items: dict[str, int], seeds: Seeds) -> IMVAE:
    with torch.random.fork_rng():
        torch.manual_seed(seeds.init)
        return IMVAE(model_config_for(config, n_items))


def selection_metric(report: EvalReport) -> float:
    """Mean over domains of all-user NDCG@10."""
    vals = [report.metric(d, "all") for d in DOMAINS]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def prepare_inputs(config: RunConfig, examples: Sequence[UserExample], n_items: dict[str, int], seeds: Seeds):
    if config.no_psg:
        return random_pseudo_sequences(examples, n_items, config.T_pseudo, seeds.pseudo)
    if any(e.pseudo_x is None for e in examples):
        raise MissingArtifactError("examples have no pseudo-sequences (run the `pseudo` stage)")
    return tuple(examples)


def save_checkpoint(path: str | Path, model: IMVAE, config: RunConfig, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict()),
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[IMVAE, RunConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"model checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    model = IMVAE(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, RunConfig.from_dict(payload["config"]), payload


def train(
    config: RunConfig,
    examples: Sequence[UserExample],
    n_items: dict[str, int],
    out_dir: str | Path | None = None,
    valid_examples: Sequence[UserExample] | None = None,
) -> TrainResult:
    """Adam training on the ``train``-role examples, keeping the epoch with the
    best validation NDCG@10 (mean of both domains).

    ``valid_examples`` defaults to the ``valid``-role examples. If ``out_dir``
    is given the best checkpoint and a JSON-lines history are written there.
    """
    config.validate()
    seeds = set_seed(config.seed)
    examples = prepare_inputs(config, examples, n_items, seeds)
    train_ex = [e for e in examples if e.role == "train"]
    if valid_examples is None:
        valid_ex = [e for e in examples if e.role == "valid"]
    else:
        valid_ex = list(prepare_inputs(config, valid_examples, n_items, seeds))
    if not train_ex:
        raise ConfigError("no training examples")

    model = build_model(config, n_items, seeds)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    arrays = ExampleArrays(train_ex)
    shuffle_rng = np.random.default_rng(seeds.shuffle)
    neg_rng = np.random.default_rng(seeds.negatives)
    noise_gen = torch.Generator().manual_seed(seeds.noise)
    val_cands = {
        d: build_candidates(valid_ex, d, n_items[d], config.eval_negatives, seeds.evaluation) for d in DOMAINS
    } if valid_ex else None

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    history: list[dict] = []
    best_metric, best_epoch, best_state = -1.0, 0, copy.deepcopy(model.state_dict())

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = shuffle_rng.permutation(len(arrays))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            negs = arrays.sample_train_negatives(idx, n_items, config.train_negatives, neg_rng)
            batch = arrays.batch(idx, negs)
            try:
                loss, _ = compute_loss(
                    model, batch, config.effective_lambda_t, config.effective_lambda_a,
                    config.a, config.b, generator=noise_gen,
                )
            except NumericalError as exc:
                model.load_state_dict(best_state)
                raise NumericalError(f"epoch {epoch}: {exc}") from exc
            opt.zero_grad()
            loss.total.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            for k, v in loss.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        if val_cands is not None:
            report = evaluate(model_scorer(model), valid_ex, n_items, config.eval_negatives,
                              seeds.evaluation, candidates=val_cands)
            metric = selection_metric(report)
            record["valid_ndcg10"] = metric
            record["valid"] = {f"{d}/{g}": c.ndcg_mean for (d, g), c in report.cells.items()}
        else:
            metric = -record["total"]
        if metric > best_metric:
            best_metric, best_epoch = metric, epoch
            best_state = copy.deepcopy(model.state_dict())
            if out_path is not None:
                save_checkpoint(out_path / "model.pt", model, config, {"epoch": epoch, "metric": metric})
        history.append(record)
        logger.info("epoch %d total %.4f valid %.4f", epoch, record["total"], metric)

    model.load_state_dict(best_state)
    model.eval()
    if out_path is not None:
        write_history(out_path / "history.jsonl", history)
    return TrainResult(
        model, history, best_epoch, best_metric, config,
        out_path / "model.pt" if out_path is not None else None,
    )


def write_history(path: str | Path, history: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def expand_grid(base: RunConfig, space: dict[str, Sequence]) -> list[RunConfig]:
    if not space:
        return [base]
    names = sorted(space)
    if any(len(space[n]) == 0 for n in names):
        raise ConfigError("empty grid")
    return [replace(base, **dict(zip(names, combo))) for combo in itertools.product(*(space[n] for n in names))]


@dataclass
class GridPoint:
    config: RunConfig
    valid_ndcg: list[float]
    test_report: EvalReport | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.valid_ndcg))

    @property
    def std(self) -> float:
        return float(np.std(self.valid_ndcg))


def _tie_key(p: GridPoint):
    return (-round(p.mean, 12), p.config.lambda_a, p.config.lambda_t, p.config.lr)


def grid_search(
    configs: Sequence[RunConfig] | dict,
    examples: Sequence[UserExample],
    n_items: dict[str, int],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    base: RunConfig | None = None,
    evaluate_test: bool = True,
    runner=None,
) -> tuple[RunConfig, list[GridPoint]]:
    """Train every grid point under every seed and pick the best seed-mean
    validation NDCG@10 (ties: lower lambda_a, then lambda_t, then lr).

    ``runner(config) -> (valid_metric, test_report | None)`` replaces the real
    training for tests and dry runs.
    """
    if isinstance(configs, dict):
        configs = expand_grid(base or RunConfig(), configs)
    if not configs:
        raise ConfigError("empty grid")
    points = []
    for cfg in configs:
        metrics, reports = [], []
        for s in seeds:
            run_cfg = replace(cfg, seed=s)
            if runner is not None:
                metric, rep = runner(run_cfg)
            else:
                res = train(run_cfg, examples, n_items)
                metric = res.best_metric
                rep = None
                if evaluate_test:
                    test_ex = [e for e in prepare_inputs(run_cfg, examples, n_items, set_seed(s)) if e.role == "test"]
                    rep = evaluate(model_scorer(res.model), test_ex, n_items, run_cfg.eval_negatives, seed=s,
                                   metadata={"config_hash": config_hash(run_cfg.to_dict())})
            metrics.append(metric)
            if rep is not None:
                reports.append(rep)
        points.append(GridPoint(cfg, metrics, merge_reports(reports) if reports else None))
    best = min(points, key=_tie_key)
    return best.config, points


def grid_report_rows(points: Sequence[GridPoint]) -> list[dict]:
    rows = []
    for p in points:
        row = {
            "lr": p.config.lr,
            "lambda_t": p.config.lambda_t,
            "lambda_a": p.config.lambda_a,
            "valid_ndcg10": f"{p.mean:.2f}±{p.std:.2f}",
            "valid_ndcg10_mean": p.mean,
            "valid_ndcg10_std": p.std,
            "n_seeds": len(p.valid_ndcg),
            "config_hash": config_hash(replace(p.config, seed=0).to_dict()),
        }
        if p.test_report is not None:
            for (d, g), c in p.test_report.cells.items():
                if c.ndcg_mean is not None:
                    row[f"test_{d}_{g}_ndcg10"] = f"{c.ndcg_mean:.2f}±{c.ndcg_std:.2f}"
                    row[f"test_{d}_{g}_hr10"] = f"{c.hr_mean:.2f}±{c.hr_std:.2f}"
        rows.append(row)
    return rows


def write_grid_report(out_dir: str | Path, points: Sequence[GridPoint]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = grid_report_rows(points)
    (out / "grid.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    keys = sorted({k for r in rows for k in r})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys)
    writer.writeheader()
    writer.writerows(rows)
    (out / "grid.csv").write_text(buf.getvalue())
