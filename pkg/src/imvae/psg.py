"""Pseudo-sequence generation from a LightGCN-style recall model.

Both domains' items live in one unified index space: domain X items occupy
``[0, n_items_x)`` and domain Y items ``[n_items_x, n_items_x + n_items_y)``.
Per-domain item indices elsewhere in the package are 1-based (0 is PAD), so
``unified = offset(domain) + item - 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import DOMAINS, PAD, X, Y, UserExample
from .errors import DataError, MissingArtifactError, NumericalError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
VISIBILITY_POLICIES = ("all_visible", "train_only")


@dataclass(frozen=True)
class BipartiteGraph:
    user_ids: tuple[str, ...]
    n_items_x: int
    n_items_y: int
    edges: np.ndarray  # (E, 2) rows of (user index, unified item index), sorted, unique

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return self.n_items_x + self.n_items_y

    def offset(self, domain: str) -> int:
        return 0 if domain == X else self.n_items_x

    def n_domain_items(self, domain: str) -> int:
        return self.n_items_x if domain == X else self.n_items_y

    def unified(self, domain: str, item: int) -> int:
        return self.offset(domain) + item - 1

    def user_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_users)

    def item_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.n_items)

    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    def normalized_adjacency(self, edges: np.ndarray | None = None, dtype=torch.float32) -> torch.Tensor:
        """Sparse ``D^-1/2 A D^-1/2`` over the (users + items) node set."""
        edges = self.edges if edges is None else edges
        n = self.n_users + self.n_items
        rows = np.concatenate([edges[:, 0], edges[:, 1] + self.n_users])
        cols = np.concatenate([edges[:, 1] + self.n_users, edges[:, 0]])
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        inv_sqrt = np.zeros_like(deg)
        nz = deg > 0
        inv_sqrt[nz] = deg[nz] ** -0.5
        vals = inv_sqrt[rows] * inv_sqrt[cols]
        idx = torch.from_numpy(np.stack([rows, cols]))
        return torch.sparse_coo_tensor(idx, torch.from_numpy(vals).to(dtype), (n, n), check_invariants=True).coalesce()


def visible_items(example: UserExample, domain: str, policy: str = "all_visible") -> tuple[int, ...]:
    """Items of ``example`` in ``domain`` that may become graph edges.

    Training users contribute their inputs plus their training target;
    evaluation users contribute inputs only, so held-out targets never leak.
    """
    if policy not in VISIBILITY_POLICIES:
        raise DataError(f"unknown visibility policy {policy!r}")
    if example.role != "train":
        return () if policy == "train_only" else example.inputs(domain)
    target = example.target(domain)
    return example.inputs(domain) + ((target,) if target is not None else ())


def build_unified_graph(
    examples: Sequence[UserExample],
    n_items: dict[str, int],
    visibility_policy: str = "all_visible",
) -> BipartiteGraph:
    users = tuple(sorted(e.user_id for e in examples))
    uidx = {u: i for i, u in enumerate(users)}
    pairs = []
    for e in examples:
        for d in DOMAINS:
            off = 0 if d == X else n_items[X]
            for item in visible_items(e, d, visibility_policy):
                pairs.append((uidx[e.user_id], off + item - 1))
    if not pairs:
        raise DataError("graph has no edges")
    edges = np.unique(np.asarray(pairs, dtype=np.int64), axis=0)
    return BipartiteGraph(users, n_items[X], n_items[Y], edges)


@dataclass
class RecallEmbeddings:
    user_matrix: np.ndarray
    item_matrix: np.ndarray
    layer_count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.user_matrix).all() and np.isfinite(self.item_matrix).all()):
            raise NumericalError("recall embeddings contain non-finite entries")

    @property
    def dim(self) -> int:
        return self.user_matrix.shape[1]

    def save(self, path: str | Path, graph: BipartiteGraph) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                version=CHECKPOINT_VERSION,
                d=self.dim,
                layer_count=self.layer_count,
                n_users=graph.n_users,
                n_items_x=graph.n_items_x,
                n_items_y=graph.n_items_y,
                user_ids=np.asarray(graph.user_ids, dtype=str),
                edges=graph.edges,
                user_matrix=self.user_matrix,
                item_matrix=self.item_matrix,
            )

    @staticmethod
    def load(path: str | Path) -> tuple["RecallEmbeddings", BipartiteGraph]:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"PSG checkpoint not found: {path}")
        with np.load(path) as z:
            if int(z["version"]) != CHECKPOINT_VERSION:
                raise DataError(f"unsupported PSG checkpoint version {int(z['version'])}")
            graph = BipartiteGraph(
                tuple(str(u) for u in z["user_ids"]), int(z["n_items_x"]), int(z["n_items_y"]), z["edges"]
            )
            emb = RecallEmbeddings(z["user_matrix"], z["item_matrix"], int(z["layer_count"]))
        return emb, graph


def _propagate(adj: torch.Tensor, ego: torch.Tensor, layers: int) -> torch.Tensor:
    out = [ego]
    h = ego
    for _ in range(layers):
        h = torch.sparse.mm(adj, h)
        out.append(h)
    return torch.stack(out).mean(dim=0)


def propagate_embeddings(
    graph: BipartiteGraph, initial: RecallEmbeddings, layers: int
) -> RecallEmbeddings:
    """Mean over propagation layers 0..``layers`` on the normalized graph.

    Isolated nodes keep their initial embedding.
    """
    if layers < 0:
        raise DataError("layers must be >= 0")
    if not (np.isfinite(initial.user_matrix).all() and np.isfinite(initial.item_matrix).all()):
        raise NumericalError("non-finite initial embeddings")
    ego = torch.from_numpy(np.concatenate([initial.user_matrix, initial.item_matrix]).astype(np.float64))
    adj = graph.normalized_adjacency(dtype=torch.float64)
    out = _propagate(adj, ego, layers).numpy()
    deg = np.concatenate([graph.user_degree(), graph.item_degree()])
    out[deg == 0] = ego.numpy()[deg == 0]
    dtype = initial.user_matrix.dtype
    return RecallEmbeddings(
        out[: graph.n_users].astype(dtype), out[graph.n_users:].astype(dtype), layers, dict(initial.meta)
    )


@dataclass(frozen=True)
class PSGConfig:
    d: int = 128
    layers: int = 3
    epochs: int = 1000
    lr: float = 1e-3
    neg_per_pos: int = 1
    val_fraction: float = 0.2
    seed: int = 0
    batch_size: int = 2048
    weight_decay: float = 1e-4
    init_std: float = 0.1
    top_k: int = 40
    eval_every: int = 1
    patience: int | None = None


def _domain_of(graph: BipartiteGraph, unified: np.ndarray) -> np.ndarray:
    return (unified >= graph.n_items_x).astype(np.int64)


def _sample_negatives(
    graph: BipartiteGraph, users: np.ndarray, pos: np.ndarray, user_sets: list[set[int]], rng: np.random.Generator
) -> np.ndarray:
    dom = _domain_of(graph, pos)
    lo = np.where(dom == 0, 0, graph.n_items_x)
    size = np.where(dom == 0, graph.n_items_x, graph.n_items_y)
    neg = lo + (rng.random(len(pos)) * size).astype(np.int64)
    for _ in range(100):
        bad = np.fromiter((n in user_sets[u] for u, n in zip(users, neg)), dtype=bool, count=len(neg))
        if not bad.any():
            break
        neg[bad] = lo[bad] + (rng.random(int(bad.sum())) * size[bad]).astype(np.int64)
    return neg


def recall_at_k(
    graph: BipartiteGraph,
    emb_users: np.ndarray,
    emb_items: np.ndarray,
    held_out: np.ndarray,
    known: np.ndarray,
    k: int,
) -> float:
    """Mean per-(user, domain) recall@k of ``held_out`` edges, ignoring ``known`` edges."""
    if len(held_out) == 0:
        return float("nan")
    recalls = []
    known_by_user: dict[int, list[int]] = {}
    for u, it in known:
        known_by_user.setdefault(int(u), []).append(int(it))
    held: dict[tuple[int, int], list[int]] = {}
    for u, it in held_out:
        held.setdefault((int(u), int(_domain_of(graph, np.array([it]))[0])), []).append(int(it))
    for (u, dom), items in held.items():
        d = DOMAINS[dom]
        off, n = graph.offset(d), graph.n_domain_items(d)
        scores = emb_items[off:off + n] @ emb_users[u]
        mask = [it - off for it in known_by_user.get(u, ()) if off <= it < off + n]
        scores[mask] = -np.inf
        kk = min(k, n)
        top = np.argpartition(-scores, kk - 1)[:kk] + off
        recalls.append(len(set(top.tolist()) & set(items)) / len(items))
    return float(np.mean(recalls))


def train_psg(
    graph: BipartiteGraph,
    config: PSGConfig,
    train_users: Sequence[str] | None = None,
) -> RecallEmbeddings:
    """BPR training of the recall model; returns the best-validation checkpoint.

    Positive pairs come from ``train_users`` (all users when ``None``). A
    ``val_fraction`` share of those edges is held out of the propagation graph
    and used to select the checkpoint by recall@``top_k``. The returned
    embeddings are propagated over the full graph.
    """
    if len(graph.edges) == 0:
        raise DataError("graph has no edges")
    rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(int(rng.integers(2**31)))

    uidx = graph.user_index()
    if train_users is None:
        sup = np.ones(len(graph.edges), dtype=bool)
    else:
        allowed = np.zeros(graph.n_users, dtype=bool)
        allowed[[uidx[u] for u in train_users if u in uidx]] = True
        sup = allowed[graph.edges[:, 0]]
    sup_idx = np.flatnonzero(sup)
    n_val = int(round(config.val_fraction * len(sup_idx)))
    val_idx = rng.choice(sup_idx, size=n_val, replace=False) if n_val else np.array([], dtype=np.int64)
    is_val = np.zeros(len(graph.edges), dtype=bool)
    is_val[val_idx] = True
    train_edges = graph.edges[~is_val]
    val_edges = graph.edges[is_val]
    pos_edges = graph.edges[sup & ~is_val]
    if len(pos_edges) == 0:
        raise DataError("no supervised edges left for PSG training")

    user_sets: list[set[int]] = [set() for _ in range(graph.n_users)]
    for u, it in graph.edges:
        user_sets[u].add(int(it))

    adj = graph.normalized_adjacency(train_edges)
    n_nodes = graph.n_users + graph.n_items
    ego = torch.nn.Parameter(torch.randn(n_nodes, config.d, generator=torch_gen) * config.init_std)
    opt = torch.optim.Adam([ego], lr=config.lr)

    def current(a: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        with torch.no_grad():
            out = _propagate(a, ego, config.layers).numpy()
        return out[: graph.n_users], out[graph.n_users:]

    best = (-1.0, ego.detach().clone(), 0)
    history = []
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(pos_edges))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = pos_edges[order[start:start + config.batch_size]]
            users = np.repeat(batch[:, 0], config.neg_per_pos)
            pos = np.repeat(batch[:, 1], config.neg_per_pos)
            neg = _sample_negatives(graph, users, pos, user_sets, rng)
            out = _propagate(adj, ego, config.layers)
            u_t = torch.from_numpy(users)
            p_t = torch.from_numpy(pos + graph.n_users)
            n_t = torch.from_numpy(neg + graph.n_users)
            pos_s = (out[u_t] * out[p_t]).sum(-1)
            neg_s = (out[u_t] * out[n_t]).sum(-1)
            reg = (ego[u_t].pow(2).sum() + ego[p_t].pow(2).sum() + ego[n_t].pow(2).sum()) / (2 * len(users))
            loss = F.softplus(neg_s - pos_s).mean() + config.weight_decay * reg
            if not torch.isfinite(loss):
                raise NumericalError(f"PSG loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        record = {"epoch": epoch, "loss": total / len(pos_edges)}
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            eu, ei = current(adj)
            rec = recall_at_k(graph, eu, ei, val_edges, train_edges, config.top_k)
            record["val_recall"] = rec
            score = rec if not math.isnan(rec) else -record["loss"]
            if score > best[0]:
                best = (score, ego.detach().clone(), epoch)
                stale = 0
            else:
                stale += 1
        history.append(record)
        logger.debug("psg epoch %d %s", epoch, record)
        if config.patience is not None and stale >= config.patience:
            break

    ego_best = best[1]
    with torch.no_grad():
        out = _propagate(graph.normalized_adjacency(), ego_best, config.layers).numpy()
    deg = np.concatenate([graph.user_degree(), graph.item_degree()])
    out[deg == 0] = ego_best.numpy()[deg == 0]
    meta = {"best_epoch": best[2], "best_val_recall": best[0], "history": history, "config": vars(config)}
    return RecallEmbeddings(out[: graph.n_users], out[graph.n_users:], config.layers, meta)


@dataclass(frozen=True)
class PseudoSequence:
    domain: str
    items: tuple[int, ...]
    recalled: tuple[bool, ...]


def rank_candidates(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Order ``candidates`` by descending score, ties by ascending index."""
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order]


def generate_pseudo(
    scores: np.ndarray,
    history: Sequence[int],
    exclude: Sequence[int] | set[int],
    length: int,
    domain: str = X,
) -> PseudoSequence:
    """Extend ``history`` with the best-scoring unseen items to exactly ``length`` items.

    ``scores`` holds one score per domain item, indexed ``item - 1``. Items in
    ``history`` or ``exclude`` are never recalled. If the catalog runs out the
    result is left padded.
    """
    prefix = tuple(history)[-length:] if length else ()
    banned = set(history) | set(exclude)
    n_items = len(scores)
    cand = np.asarray([i for i in range(n_items) if (i + 1) not in banned], dtype=np.int64)
    n_fill = length - len(prefix)
    recalled = tuple(int(i) + 1 for i in rank_candidates(scores, cand)[:n_fill]) if len(cand) else ()
    items = prefix + recalled
    pad = length - len(items)
    return PseudoSequence(
        domain=domain,
        items=(PAD,) * pad + items,
        recalled=(False,) * (pad + len(prefix)) + (True,) * len(recalled),
    )


def attach_pseudo_sequences(
    examples: Sequence[UserExample],
    embeddings: RecallEmbeddings,
    graph: BipartiteGraph,
    length: int,
    visibility_policy: str = "all_visible",
) -> tuple[UserExample, ...]:
    """Fill ``pseudo_x`` / ``pseudo_y`` of every example from the recall model."""
    uidx = graph.user_index()
    udeg = graph.user_degree()
    item_deg = graph.item_degree()
    out = []
    for e in examples:
        pseudo = {}
        i = uidx.get(e.user_id)
        for d in DOMAINS:
            off, n = graph.offset(d), graph.n_domain_items(d)
            if i is None or udeg[i] == 0:
                scores = item_deg[off:off + n].astype(np.float64)
            else:
                scores = embeddings.item_matrix[off:off + n] @ embeddings.user_matrix[i]
            # graph-visible items of a training user include its training target
            exclude = set(visible_items(e, d, "all_visible"))
            pseudo[d] = generate_pseudo(scores, e.inputs(d), exclude, length, d).items
        out.append(replace(e, pseudo_x=pseudo[X], pseudo_y=pseudo[Y]))
    return tuple(out)


def random_pseudo_sequences(
    examples: Sequence[UserExample], n_items: dict[str, int], length: int, seed: int
) -> tuple[UserExample, ...]:
    """Replace pseudo-sequences by uniformly random same-domain items (no PSG)."""
    rng = np.random.default_rng(seed)
    out = []
    for e in examples:
        pseudo = {}
        for d in DOMAINS:
            k = min(length, n_items[d])
            items = tuple(int(v) + 1 for v in rng.choice(n_items[d], size=k, replace=False))
            pseudo[d] = (PAD,) * (length - k) + items
        out.append(replace(e, pseudo_x=pseudo[X], pseudo_y=pseudo[Y]))
    return tuple(out)
