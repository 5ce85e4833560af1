"""Synthetic two-domain corpora with planted shared and domain-specific interests.

Every item belongs to one shared-interest cluster and one domain-specific
cluster. Every user carries one shared interest (common to both domains) and
one specific interest per domain. Interactions are drawn from a mixture of
"matches both", "matches shared", "matches specific" and popularity noise, so
a user's history in one domain is informative about the other domain only
through the shared interest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DOMAINS, X, Y, InteractionLog, make_log


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 2000
    overlap: float = 0.3
    n_items_x: int = 400
    n_items_y: int = 400
    n_shared: int = 8
    n_specific: int = 5
    p_both: float = 0.45
    p_shared: float = 0.25
    p_specific: float = 0.15
    # remaining mass: popularity-weighted noise
    mean_extra_len: float = 6.0
    min_len: int = 2
    max_len: int = 40
    zipf: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class PlantedTruth:
    shared: dict[str, int]
    specific: dict[str, dict[str, int]]
    item_shared: dict[str, np.ndarray]
    item_specific: dict[str, np.ndarray]


def generate_corpus(spec: SyntheticSpec = SyntheticSpec()) -> tuple[InteractionLog, InteractionLog, PlantedTruth]:
    rng = np.random.default_rng(spec.seed)
    n_items = {X: spec.n_items_x, Y: spec.n_items_y}
    item_shared, item_specific, popularity = {}, {}, {}
    for d in DOMAINS:
        n = n_items[d]
        item_shared[d] = rng.integers(0, spec.n_shared, size=n)
        item_specific[d] = rng.integers(0, spec.n_specific, size=n)
        weights = 1.0 / np.arange(1, n + 1) ** spec.zipf
        popularity[d] = rng.permutation(weights / weights.sum())

    n_overlap = round(spec.overlap * spec.n_users)
    n_single = spec.n_users - n_overlap
    users = [f"u{i:05d}" for i in range(spec.n_users)]
    membership = {}
    for i, u in enumerate(users):
        if i < n_overlap:
            membership[u] = DOMAINS
        elif i < n_overlap + n_single // 2:
            membership[u] = (X,)
        else:
            membership[u] = (Y,)

    shared = {u: int(rng.integers(spec.n_shared)) for u in users}
    specific = {d: {u: int(rng.integers(spec.n_specific)) for u in users} for d in DOMAINS}
    p_noise = 1.0 - spec.p_both - spec.p_shared - spec.p_specific
    mix = np.array([spec.p_both, spec.p_shared, spec.p_specific, p_noise])

    rows = {X: [], Y: []}
    for u in users:
        t = int(rng.integers(1_000_000, 2_000_000))
        for d in membership[u]:
            length = min(spec.max_len, spec.min_len + int(rng.geometric(1.0 / (1.0 + spec.mean_extra_len))) - 1)
            s_match = item_shared[d] == shared[u]
            a_match = item_specific[d] == specific[d][u]
            pools = [np.flatnonzero(s_match & a_match), np.flatnonzero(s_match), np.flatnonzero(a_match)]
            used: set[int] = set()
            for _ in range(length):
                for _attempt in range(20):
                    kind = rng.choice(4, p=mix)
                    if kind < 3 and len(pools[kind]):
                        item = int(rng.choice(pools[kind]))
                    else:
                        item = int(rng.choice(n_items[d], p=popularity[d]))
                    if item not in used:
                        break
                else:
                    item = int(rng.choice(np.setdiff1d(np.arange(n_items[d]), list(used))))
                used.add(item)
                t += int(rng.integers(1, 10_000))
                rows[d].append((u, f"{d.lower()}{item:05d}", t))
    log_x = make_log(rows[X], X)
    log_y = make_log(rows[Y], Y)
    truth = PlantedTruth(shared, specific, item_shared, item_specific)
    return log_x, log_y, truth
