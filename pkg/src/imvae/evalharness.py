"""Leave-one-out ranking evaluation against sampled negatives."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import DOMAINS, PAD, X, Y, UserExample
from .errors import DataError, NumericalError

GROUPS = ("tailed", "cold_start", "all")
MIN_CATALOG = 10

# scorer(examples, domain, candidates[B, C]) -> scores[B, C]
Scorer = Callable[[Sequence[UserExample], str, np.ndarray], np.ndarray]


def _user_rng(user: str, domain: str, seed: int) -> np.random.Generator:
    key = [seed, DOMAINS.index(domain), zlib.crc32(user.encode("utf-8"))]
    return np.random.default_rng(np.random.SeedSequence(key))


def sample_negatives(
    user: str,
    domain: str,
    positive: int,
    seen: Sequence[int] | frozenset[int],
    n_items: int,
    n: int = 999,
    seed: int = 0,
) -> np.ndarray:
    """Uniform sample without replacement of items the user never touched.

    When fewer than ``n`` eligible items exist all of them are returned.
    """
    if n_items < MIN_CATALOG:
        raise DataError(f"catalog of {n_items} items is too small for ranking metrics")
    banned = np.fromiter(set(seen) | {positive}, dtype=np.int64)
    pool = np.setdiff1d(np.arange(1, n_items + 1), banned, assume_unique=True)
    if len(pool) <= n:
        return pool
    rng = _user_rng(user, domain, seed)
    return np.sort(rng.choice(pool, size=n, replace=False))


def rank_of_positive(scores: np.ndarray, pos_position: int) -> int:
    """1-based rank; candidates tied with the positive are ranked above it."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise NumericalError("NaN in candidate scores")
    pos = scores[pos_position]
    return int((scores >= pos).sum())


def rank_metrics(scores: np.ndarray, pos_position: int, k: int = 10) -> tuple[float, float]:
    """``(HR@k, NDCG@k)`` of the single positive among ``scores``."""
    r = rank_of_positive(scores, pos_position)
    if r > k:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(r + 1)


def batch_rank_metrics(scores: np.ndarray, valid: np.ndarray, k: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`rank_metrics` with the positive in column 0.

    ``valid`` masks padded candidate columns.
    """
    if np.isnan(scores[valid]).any():
        raise NumericalError("NaN in candidate scores")
    ranks = ((scores >= scores[:, :1]) & valid).sum(axis=1)
    hit = ranks <= k
    ndcg = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return hit.astype(np.float64), ndcg


@dataclass
class Candidates:
    """Frozen candidate lists (positive first) for one domain."""

    rows: list[int]  # indices into the evaluated example list
    items: np.ndarray  # (n, C) item indices, PAD where a user has fewer candidates
    valid: np.ndarray  # (n, C)
    shortfall: int = 0


def build_candidates(
    examples: Sequence[UserExample], domain: str, n_items: int, n_neg: int = 999, seed: int = 0
) -> Candidates:
    rows, lists = [], []
    shortfall = 0
    for i, e in enumerate(examples):
        target = e.target(domain)
        if target is None:
            continue
        negs = sample_negatives(e.user_id, domain, target, e.seen(domain), n_items, n_neg, seed)
        shortfall += max(0, n_neg - len(negs))
        rows.append(i)
        lists.append(np.concatenate([[target], negs]))
    width = max((len(x) for x in lists), default=1)
    items = np.full((len(lists), width), PAD, dtype=np.int64)
    valid = np.zeros((len(lists), width), dtype=bool)
    for r, lst in enumerate(lists):
        items[r, : len(lst)] = lst
        valid[r, : len(lst)] = True
    return Candidates(rows, items, valid, shortfall)


@dataclass
class CellResult:
    hr: list[float] = field(default_factory=list)
    ndcg: list[float] = field(default_factory=list)
    n_users: int = 0

    @staticmethod
    def _stat(values, fn):
        vals = [v for v in values if v is not None]
        return fn(vals) if vals else None

    @property
    def hr_mean(self):
        return self._stat(self.hr, lambda v: float(np.mean(v)))

    @property
    def ndcg_mean(self):
        return self._stat(self.ndcg, lambda v: float(np.mean(v)))

    @property
    def hr_std(self):
        return self._stat(self.hr, lambda v: float(np.std(v)))

    @property
    def ndcg_std(self):
        return self._stat(self.ndcg, lambda v: float(np.std(v)))


@dataclass
class EvalReport:
    """HR@k / NDCG@k in percent for every (domain, group) cell; one value per seed."""

    cells: dict[tuple[str, str], CellResult]
    metadata: dict = field(default_factory=dict)

    def metric(self, domain: str, group: str, name: str = "ndcg") -> float | None:
        cell = self.cells[(domain, group)]
        return cell.ndcg_mean if name == "ndcg" else cell.hr_mean

    def to_dict(self) -> dict:
        return {
            "cells": {
                f"{d}/{g}": {
                    "n_users": c.n_users,
                    "hr_at_10": c.hr,
                    "ndcg_at_10": c.ndcg,
                    "hr_mean": c.hr_mean,
                    "hr_std": c.hr_std,
                    "ndcg_mean": c.ndcg_mean,
                    "ndcg_std": c.ndcg_std,
                }
                for (d, g), c in self.cells.items()
            },
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "EvalReport":
        cells = {}
        for key, c in payload["cells"].items():
            d, g = key.split("/")
            cells[(d, g)] = CellResult(list(c["hr_at_10"]), list(c["ndcg_at_10"]), c["n_users"])
        return cls(cells, payload.get("metadata", {}))

    def format_table(self) -> str:
        """Rows per user group and metric, one column per domain, ``mean±std``."""
        def fmt(mean, std):
            if mean is None:
                return "n/a"
            return f"{mean:.2f}±{std:.2f}"

        names = {"tailed": "Tailed", "cold_start": "Cold-start", "all": "All"}
        lines = [f"{'Users':<11} {'Metric':<8} " + " ".join(f"{d:>13}" for d in DOMAINS)]
        for g in GROUPS:
            for metric, label in (("ndcg", "NDCG@10"), ("hr", "HR@10")):
                vals = []
                for d in DOMAINS:
                    c = self.cells[(d, g)]
                    if metric == "ndcg":
                        vals.append(fmt(c.ndcg_mean, c.ndcg_std))
                    else:
                        vals.append(fmt(c.hr_mean, c.hr_std))
                lines.append(f"{names[g]:<11} {label:<8} " + " ".join(f"{v:>13}" for v in vals))
        return "\n".join(lines)


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Stack single-seed reports into one report with per-seed value lists."""
    cells = {}
    for key in reports[0].cells:
        merged = CellResult(n_users=reports[0].cells[key].n_users)
        for r in reports:
            merged.hr.extend(r.cells[key].hr)
            merged.ndcg.extend(r.cells[key].ndcg)
        cells[key] = merged
    meta = dict(reports[0].metadata)
    meta["seeds"] = [r.metadata.get("seed") for r in reports]
    return EvalReport(cells, meta)


def group_members(example: UserExample, domain: str) -> set[str]:
    groups = {"all"}
    if f"tailed_{domain.lower()}" in example.tags:
        groups.add("tailed")
    if example.cold_start_domain == domain:
        groups.add("cold_start")
    return groups


def evaluate(
    scorer: Scorer,
    examples: Sequence[UserExample],
    n_items: dict[str, int],
    n_neg: int = 999,
    seed: int = 0,
    k: int = 10,
    candidates: dict[str, Candidates] | None = None,
    batch_size: int = 1024,
    metadata: dict | None = None,
) -> EvalReport:
    """Score every user with a target against its candidate set and aggregate
    HR@k / NDCG@k per domain and user group."""
    cells: dict[tuple[str, str], CellResult] = {}
    for d in DOMAINS:
        cand = candidates[d] if candidates else build_candidates(examples, d, n_items[d], n_neg, seed)
        hits = np.zeros(len(cand.rows))
        ndcgs = np.zeros(len(cand.rows))
        for start in range(0, len(cand.rows), batch_size):
            sl = slice(start, start + batch_size)
            rows = cand.rows[sl]
            items = cand.items[sl]
            scores = np.asarray(scorer([examples[i] for i in rows], d, items), dtype=np.float64)
            scores = np.where(cand.valid[sl], scores, -np.inf)
            hits[sl], ndcgs[sl] = batch_rank_metrics(scores, cand.valid[sl], k)
        members = [group_members(examples[i], d) for i in cand.rows]
        for g in GROUPS:
            sel = np.array([g in m for m in members], dtype=bool)
            n = int(sel.sum())
            if n:
                cells[(d, g)] = CellResult([100 * float(hits[sel].mean())], [100 * float(ndcgs[sel].mean())], n)
            else:
                cells[(d, g)] = CellResult([None], [None], 0)
    meta = {"seed": seed, "negative_seed": seed, "n_neg": n_neg, "k": k}
    meta.update(metadata or {})
    return EvalReport(cells, meta)


def random_scorer(seed: int) -> Scorer:
    """Scores drawn i.i.d. uniform: a model with no information."""
    rng = np.random.default_rng(seed)

    def scorer(batch, domain, candidates):
        return rng.random(candidates.shape)

    return scorer


def model_scorer(model, batch_size: int | None = None) -> Scorer:
    """Scorer backed by an IM-VAE in eval mode (noise-free latents)."""
    from .model import ExampleArrays

    def scorer(batch_examples, domain, candidates):
        model.eval()
        arrays = ExampleArrays(batch_examples)
        batch = arrays.batch(np.arange(len(batch_examples)))
        with torch.no_grad():
            out = model(batch)
            items = torch.from_numpy(np.where(candidates == PAD, 1, candidates))
            return model.score_candidates(out.user_vectors[domain], domain, items).double().numpy()

    return scorer
