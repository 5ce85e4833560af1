"""Rating-log ingestion, user splits, cold-start simulation and example building.

Items are indexed per domain starting at 1; index 0 is reserved for padding.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataError, MissingArtifactError

logger = logging.getLogger(__name__)

X = "X"
Y = "Y"
DOMAINS = (X, Y)
PAD = 0
ROLES = ("train", "valid", "test")

MAX_MALFORMED_FRACTION = 0.01


def other(domain: str) -> str:
    return Y if domain == X else X


class Interaction(NamedTuple):
    user: str
    item: str
    timestamp: int
    domain: str


@dataclass(frozen=True)
class InteractionLog:
    """Chronologically sorted positive interactions of one domain."""

    domain: str
    records: tuple[Interaction, ...]
    n_malformed: int = 0
    n_duplicates: int = 0

    def sequences(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {}
        for rec in self.records:
            out.setdefault(rec.user, []).append(rec.item)
        return {u: tuple(items) for u, items in out.items()}

    @property
    def users(self) -> set[str]:
        return {r.user for r in self.records}

    @property
    def items(self) -> set[str]:
        return {r.item for r in self.records}

    def stats(self) -> dict:
        n_users = len(self.users)
        n_items = len(self.items)
        n_edges = len(self.records)
        return {
            "domain": self.domain,
            "n_users": n_users,
            "n_items": n_items,
            "n_interactions": n_edges,
            "density": n_edges / (n_users * n_items) if n_users and n_items else 0.0,
            "mean_seq_len": n_edges / n_users if n_users else 0.0,
            "n_malformed": self.n_malformed,
            "n_duplicates": self.n_duplicates,
        }


def make_log(rows: Iterable[tuple[str, str, int]], domain: str, n_malformed: int = 0) -> InteractionLog:
    """Build a log from ``(user, item, timestamp)`` rows given in file order.

    Exact duplicate rows keep their first occurrence. The stable sort keeps
    file order as the tiebreak for equal timestamps.
    """
    seen: set[tuple[str, str, int]] = set()
    kept: list[Interaction] = []
    n_dup = 0
    for user, item, ts in rows:
        key = (user, item, ts)
        if key in seen:
            n_dup += 1
            continue
        seen.add(key)
        kept.append(Interaction(user, item, int(ts), domain))
    kept.sort(key=lambda r: (r.user, r.timestamp))
    return InteractionLog(domain, tuple(kept), n_malformed=n_malformed, n_duplicates=n_dup)


def _parse_row(fields: Sequence[str]) -> tuple[str, str, int]:
    if len(fields) < 4:
        raise ValueError("expected 4 fields")
    user, item, rating, ts = (f.strip() for f in fields[:4])
    if not user or not item:
        raise ValueError("empty id")
    float(rating)
    ts_f = float(ts)
    if not math.isfinite(ts_f):
        raise ValueError("bad timestamp")
    return user, item, int(ts_f)


def ingest_ratings(path: str | Path, domain: str, delimiter: str | None = None) -> InteractionLog:
    """Read a ``user,item,rating,timestamp`` file into an :class:`InteractionLog`.

    Rating values are parsed (to validate the line) and then discarded. A
    non-parseable first line is treated as a header.
    """
    path = Path(path)
    if domain not in DOMAINS:
        raise DataError(f"unknown domain {domain!r}")
    if not path.exists():
        raise MissingArtifactError(f"ratings file not found: {path}")
    if delimiter is None:
        delimiter = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            lines = list(csv.reader(fh, delimiter=delimiter))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    rows: list[tuple[str, str, int]] = []
    bad_lines: list[int] = []
    n_lines = 0
    for lineno, fields in enumerate(lines, start=1):
        if not fields or all(not f.strip() for f in fields):
            continue
        try:
            rows.append(_parse_row(fields))
        except ValueError:
            if lineno == 1:
                continue  # header
            bad_lines.append(lineno)
        n_lines += 1

    if n_lines and len(bad_lines) > MAX_MALFORMED_FRACTION * n_lines:
        shown = ", ".join(map(str, bad_lines[:20]))
        raise DataError(
            f"{path}: {len(bad_lines)}/{n_lines} malformed lines (> 1%), first at lines {shown}"
        )
    if not rows:
        raise DataError(f"{path}: no records")
    log = make_log(rows, domain, n_malformed=len(bad_lines))
    logger.info("ingested %s: %s", path, log.stats())
    return log


def downsample_log(log: InteractionLog, fraction: float, seed: int) -> InteractionLog:
    """Keep a uniform random ``fraction`` of interaction records."""
    if not 0 < fraction <= 1:
        raise DataError(f"density fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return log
    n = len(log.records)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=max(1, round(fraction * n)), replace=False))
    return replace(log, records=tuple(log.records[i] for i in keep))


@dataclass(frozen=True)
class UserSplit:
    """User roles, overlap flags and the per-domain raw sequences they apply to."""

    role_of_user: dict[str, str]
    overlap_flag: dict[str, bool]
    cold_start_domain: dict[str, str | None]
    dropped_domain: dict[str, str | None]
    sequences_x: dict[str, tuple[str, ...]]
    sequences_y: dict[str, tuple[str, ...]]
    items_x: tuple[str, ...]
    items_y: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def sequences(self, domain: str) -> dict[str, tuple[str, ...]]:
        return self.sequences_x if domain == X else self.sequences_y

    def items(self, domain: str) -> tuple[str, ...]:
        return self.items_x if domain == X else self.items_y

    @property
    def users(self) -> list[str]:
        return sorted(self.role_of_user)

    def to_json(self) -> str:
        payload = {
            "role_of_user": self.role_of_user,
            "overlap_flag": self.overlap_flag,
            "cold_start_domain": self.cold_start_domain,
            "dropped_domain": self.dropped_domain,
            "sequences_x": {u: list(s) for u, s in self.sequences_x.items()},
            "sequences_y": {u: list(s) for u, s in self.sequences_y.items()},
            "items_x": list(self.items_x),
            "items_y": list(self.items_y),
            "meta": self.meta,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "UserSplit":
        p = json.loads(text)
        return cls(
            role_of_user=p["role_of_user"],
            overlap_flag=p["overlap_flag"],
            cold_start_domain=p["cold_start_domain"],
            dropped_domain=p["dropped_domain"],
            sequences_x={u: tuple(s) for u, s in p["sequences_x"].items()},
            sequences_y={u: tuple(s) for u, s in p["sequences_y"].items()},
            items_x=tuple(p["items_x"]),
            items_y=tuple(p["items_y"]),
            meta=p["meta"],
        )


def split_users(
    log_x: InteractionLog,
    log_y: InteractionLog,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    k_o: float = 1.0,
    seed: int = 0,
) -> UserSplit:
    """Assign every user a role and downsample overlapping training users.

    With ``k_o < 1`` a random ``1 - k_o`` share of overlapping training users
    loses one (uniformly chosen) domain's history; evaluation users are untouched.
    """
    if not 0 < k_o <= 1:
        raise DataError(f"k_o must lie in (0, 1], got {k_o}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    seq_x, seq_y = log_x.sequences(), log_y.sequences()
    if len(seq_x) < 10 or len(seq_y) < 10:
        raise DataError(
            f"need at least 10 users per domain to split (X={len(seq_x)}, Y={len(seq_y)})"
        )

    users = sorted(set(seq_x) | set(seq_y))
    n = len(users)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = round(ratios[0] * n)
    n_valid = round(ratios[1] * n)
    role: dict[str, str] = {}
    for rank, idx in enumerate(perm):
        if rank < n_train:
            role[users[idx]] = "train"
        elif rank < n_train + n_valid:
            role[users[idx]] = "valid"
        else:
            role[users[idx]] = "test"

    overlap = {u: (u in seq_x and u in seq_y) for u in users}
    dropped: dict[str, str | None] = {u: None for u in users}
    candidates = [u for u in users if overlap[u] and role[u] == "train"]
    n_drop = round((1 - k_o) * len(candidates))
    if n_drop:
        chosen = rng.choice(len(candidates), size=n_drop, replace=False)
        sides = rng.integers(0, 2, size=n_drop)
        for idx, side in zip(sorted(chosen), sides):
            dropped[candidates[idx]] = DOMAINS[side]

    return UserSplit(
        role_of_user=role,
        overlap_flag=overlap,
        cold_start_domain={u: None for u in users},
        dropped_domain=dropped,
        sequences_x=seq_x,
        sequences_y=seq_y,
        items_x=tuple(sorted(log_x.items)),
        items_y=tuple(sorted(log_y.items)),
        meta={"seed": seed, "k_o": k_o, "ratios": list(ratios), "k_cs": 0.0},
    )


def simulate_cold_start(split: UserSplit, k_cs: float, seed: int) -> UserSplit:
    """Mark a random ``k_cs`` share of overlapping valid and test users as cold-start.

    The share is taken separately within the valid and the test role. Each
    chosen user gets one uniformly drawn domain whose history is hidden, apart
    from its last interaction which becomes the evaluation target.
    """
    if not 0 <= k_cs <= 1:
        raise DataError(f"k_cs must lie in [0, 1], got {k_cs}")
    cold: dict[str, str | None] = {u: None for u in split.role_of_user}
    rng = np.random.default_rng(seed)
    total_candidates = 0
    for role in ("valid", "test"):
        cands = [
            u for u in split.users
            if split.role_of_user[u] == role and split.overlap_flag[u] and split.dropped_domain[u] is None
        ]
        total_candidates += len(cands)
        n_cold = round(k_cs * len(cands))
        if not n_cold:
            continue
        chosen = rng.choice(len(cands), size=n_cold, replace=False)
        sides = rng.integers(0, 2, size=n_cold)
        for idx, side in zip(sorted(chosen), sides):
            cold[cands[idx]] = DOMAINS[side]
    if k_cs > 0 and total_candidates == 0:
        raise DataError("k_cs > 0 but there are no overlapping valid/test users")
    meta = dict(split.meta, k_cs=k_cs, cold_seed=seed)
    return replace(split, cold_start_domain=cold, meta=meta)


@dataclass(frozen=True)
class UserExample:
    """Model-ready view of one user: padded inputs, targets, pseudo-sequences, tags."""

    user_id: str
    role: str
    seq_x: tuple[int, ...]
    seq_y: tuple[int, ...]
    true_len_x: int
    true_len_y: int
    target_x: int | None
    target_y: int | None
    seen_x: frozenset[int] = frozenset()
    seen_y: frozenset[int] = frozenset()
    pseudo_x: tuple[int, ...] | None = None
    pseudo_y: tuple[int, ...] | None = None
    tags: frozenset[str] = frozenset()
    cold_start_domain: str | None = None

    def seq(self, domain: str) -> tuple[int, ...]:
        return self.seq_x if domain == X else self.seq_y

    def true_len(self, domain: str) -> int:
        return self.true_len_x if domain == X else self.true_len_y

    def target(self, domain: str) -> int | None:
        return self.target_x if domain == X else self.target_y

    def seen(self, domain: str) -> frozenset[int]:
        return self.seen_x if domain == X else self.seen_y

    def pseudo(self, domain: str) -> tuple[int, ...] | None:
        return self.pseudo_x if domain == X else self.pseudo_y

    def inputs(self, domain: str) -> tuple[int, ...]:
        """The real (unpadded) input items."""
        n = self.true_len(domain)
        return self.seq(domain)[len(self.seq(domain)) - n:] if n else ()


def _pad_left(items: Sequence[int], length: int) -> tuple[int, ...]:
    items = tuple(items)[-length:] if length else ()
    return (PAD,) * (length - len(items)) + items


def build_examples(split: UserSplit, T: int) -> tuple[UserExample, ...]:
    """Leave-one-out examples: the last visible item is the target, the preceding
    ``T`` items (left padded) are the input."""
    if T < 2:
        raise DataError(f"T must be >= 2, got {T}")
    vocab = {
        X: {item: i + 1 for i, item in enumerate(split.items_x)},
        Y: {item: i + 1 for i, item in enumerate(split.items_y)},
    }
    examples = []
    for user in split.users:
        per_domain = {}
        for d in DOMAINS:
            hist = [vocab[d][it] for it in split.sequences(d).get(user, ())]
            seen = frozenset(hist)
            if split.dropped_domain[user] == d:
                hist = []
            if not hist:
                inputs, target = [], None
            elif split.cold_start_domain[user] == d:
                inputs, target = [], hist[-1]
            else:
                # a re-consumed target would otherwise leak into its own input
                target = hist[-1]
                inputs = [i for i in hist[:-1] if i != target][-T:]
            per_domain[d] = (_pad_left(inputs, T), len(inputs), target, seen)

        tags = set()
        if split.overlap_flag[user] and split.dropped_domain[user] is None:
            tags.add("overlapping")
        if split.cold_start_domain[user] is not None:
            tags.add("cold_start")
        examples.append(
            UserExample(
                user_id=user,
                role=split.role_of_user[user],
                seq_x=per_domain[X][0],
                seq_y=per_domain[Y][0],
                true_len_x=per_domain[X][1],
                true_len_y=per_domain[Y][1],
                target_x=per_domain[X][2],
                target_y=per_domain[Y][2],
                seen_x=per_domain[X][3],
                seen_y=per_domain[Y][3],
                tags=frozenset(tags),
                cold_start_domain=split.cold_start_domain[user],
            )
        )
    return tuple(examples)


def tailed_threshold(lengths: Sequence[int]) -> float:
    """Mean length of the shortest ``floor(0.8 n)`` users (at least one)."""
    ordered = sorted(lengths)
    k = max(1, len(ordered) * 4 // 5)
    return sum(ordered[:k]) / k


def tag_user_groups(examples: Sequence[UserExample], domain: str) -> tuple[UserExample, ...]:
    """Add ``tailed_<domain>`` to users whose input length is strictly below the
    bottom-80% mean, computed over users evaluable (non cold-start, with a
    target) in ``domain``."""
    if not examples:
        raise DataError("cannot tag an empty example set")
    tag = f"tailed_{domain.lower()}"
    population = [
        e for e in examples
        if e.target(domain) is not None and e.cold_start_domain != domain
    ]
    if not population:
        return tuple(examples)
    threshold = tailed_threshold([e.true_len(domain) for e in population])
    members = {e.user_id for e in population if e.true_len(domain) < threshold}
    out = []
    for e in examples:
        tags = set(e.tags) - {tag}
        if e.user_id in members:
            tags.add(tag)
        if e.cold_start_domain is not None:
            tags.add("cold_start")
        out.append(replace(e, tags=frozenset(tags)))
    return tuple(out)


def prepare_examples(split: UserSplit, T: int) -> tuple[UserExample, ...]:
    """``build_examples`` followed by tailed tagging in both domains."""
    examples = build_examples(split, T)
    for d in DOMAINS:
        examples = tag_user_groups(examples, d)
    return examples


# ---------------------------------------------------------------- example store

_TAG_BITS = ("tailed_x", "tailed_y", "cold_start", "overlapping")
_DOMAIN_CODE = {None: -1, X: 0, Y: 1}


def _csr(sets: Sequence[frozenset[int]]) -> tuple[np.ndarray, np.ndarray]:
    indptr = np.zeros(len(sets) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(s) for s in sets])
    indices = np.fromiter((i for s in sets for i in sorted(s)), dtype=np.int64, count=int(indptr[-1]))
    return indptr, indices


def _pseudo_array(examples: Sequence[UserExample], domain: str) -> np.ndarray:
    rows = [e.pseudo(domain) for e in examples]
    if any(r is None for r in rows):
        return np.zeros((0, 0), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64).reshape(len(rows), -1)


def save_examples(path: str | Path, examples: Sequence[UserExample]) -> None:
    """Write the example store as a compressed ``.npz`` archive."""
    arrays = {
        "user_id": np.asarray([e.user_id for e in examples], dtype=str),
        "role": np.asarray([ROLES.index(e.role) for e in examples], dtype=np.int8),
        "seq_x": np.asarray([e.seq_x for e in examples], dtype=np.int64),
        "seq_y": np.asarray([e.seq_y for e in examples], dtype=np.int64),
        "true_len_x": np.asarray([e.true_len_x for e in examples], dtype=np.int64),
        "true_len_y": np.asarray([e.true_len_y for e in examples], dtype=np.int64),
        "target_x": np.asarray([-1 if e.target_x is None else e.target_x for e in examples], dtype=np.int64),
        "target_y": np.asarray([-1 if e.target_y is None else e.target_y for e in examples], dtype=np.int64),
        "tags": np.asarray(
            [sum(1 << i for i, t in enumerate(_TAG_BITS) if t in e.tags) for e in examples], dtype=np.int64
        ),
        "cold": np.asarray([_DOMAIN_CODE[e.cold_start_domain] for e in examples], dtype=np.int8),
        "pseudo_x": _pseudo_array(examples, X),
        "pseudo_y": _pseudo_array(examples, Y),
    }
    for d in DOMAINS:
        indptr, indices = _csr([e.seen(d) for e in examples])
        arrays[f"seen_{d.lower()}_indptr"] = indptr
        arrays[f"seen_{d.lower()}_indices"] = indices
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_examples(path: str | Path) -> tuple[UserExample, ...]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"example store not found: {path}")
    with np.load(path) as z:
        a = {k: z[k] for k in z.files}
    code_to_domain = {v: k for k, v in _DOMAIN_CODE.items()}
    n = len(a["user_id"])
    out = []
    for i in range(n):
        seen = {}
        for d in DOMAINS:
            ptr, idx = a[f"seen_{d.lower()}_indptr"], a[f"seen_{d.lower()}_indices"]
            seen[d] = frozenset(int(v) for v in idx[ptr[i]:ptr[i + 1]])
        tx, ty = int(a["target_x"][i]), int(a["target_y"][i])
        out.append(
            UserExample(
                user_id=str(a["user_id"][i]),
                role=ROLES[int(a["role"][i])],
                seq_x=tuple(int(v) for v in a["seq_x"][i]),
                seq_y=tuple(int(v) for v in a["seq_y"][i]),
                true_len_x=int(a["true_len_x"][i]),
                true_len_y=int(a["true_len_y"][i]),
                target_x=None if tx < 0 else tx,
                target_y=None if ty < 0 else ty,
                seen_x=seen[X],
                seen_y=seen[Y],
                pseudo_x=tuple(int(v) for v in a["pseudo_x"][i]) if a["pseudo_x"].size else None,
                pseudo_y=tuple(int(v) for v in a["pseudo_y"][i]) if a["pseudo_y"].size else None,
                tags=frozenset(t for b, t in enumerate(_TAG_BITS) if int(a["tags"][i]) >> b & 1),
                cold_start_domain=code_to_domain[int(a["cold"][i])],
            )
        )
    return tuple(out)


def catalog_sizes(split: UserSplit) -> dict[str, int]:
    return {X: len(split.items_x), Y: len(split.items_y)}
