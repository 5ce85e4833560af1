import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imvae.corpus import PAD, UserExample
from imvae.errors import DataError, NumericalError
from imvae.evalharness import (
    EvalReport, batch_rank_metrics, build_candidates, evaluate, merge_reports, random_scorer,
    rank_metrics, sample_negatives,
)


def brute_force(scores, pos, k=10):
    """Full sort, positive placed after every candidate it ties with, explicit DCG over IDCG."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i == pos))
    rel = [1.0 if i == pos else 0.0 for i in order[:k]]
    dcg = sum(r / math.log2(j + 2) for j, r in enumerate(rel))
    return float(any(rel)), dcg / 1.0


def make_user(uid, tx=None, ty=None, seen_x=(), seen_y=(), tags=(), cold=None):
    return UserExample(uid, "test", (PAD,), (PAD,), 0, 0, tx, ty, frozenset(seen_x), frozenset(seen_y),
                       tags=frozenset(tags), cold_start_domain=cold)


# ---------------------------------------------------------------- rank metrics

def test_rank_examples():
    s = np.arange(20, dtype=float)
    assert rank_metrics(s, 19) == (1.0, 1.0)
    assert rank_metrics(s, 17) == (1.0, 0.5)
    assert rank_metrics(s, 9) == (0.0, 0.0)
    # a constant-score model lands at the bottom
    assert rank_metrics(np.zeros(1000), 0) == (0.0, 0.0)
    with pytest.raises(NumericalError):
        rank_metrics(np.array([0.1, np.nan]), 0)


def test_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(300):
        s = rng.integers(0, 30, size=200).astype(float)
        pos = int(rng.integers(200))
        assert rank_metrics(s, pos) == brute_force(s, pos)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=60), st.data())
def test_strictly_increasing_transform_invariance(raw, data):
    # integer grid keeps the transforms strictly increasing in floating point too
    s = np.asarray(raw, dtype=float) / 100
    pos = data.draw(st.integers(0, len(s) - 1))
    for f in (np.exp, lambda v: 3 * v + 1, np.arctan, lambda v: v ** 3):
        assert rank_metrics(f(s), pos) == rank_metrics(s, pos)


def test_batch_version_agrees():
    rng = np.random.default_rng(1)
    s = rng.integers(0, 50, size=(64, 100)).astype(float)
    valid = np.ones_like(s, dtype=bool)
    valid[::3, 80:] = False
    s[~valid] = -np.inf
    hr, nd = batch_rank_metrics(s, valid)
    for b in range(64):
        n = int(valid[b].sum())
        assert (hr[b], nd[b]) == rank_metrics(s[b, :n], 0)


# ---------------------------------------------------------------- negatives

def test_exhaustive_negatives():
    negs = sample_negatives("u", "X", 5, [], 1000, 999)
    assert len(negs) == 999 and 5 not in negs
    assert sorted(negs) == [i for i in range(1, 1001) if i != 5]


def test_negatives_exclude_history_and_are_deterministic():
    rng = np.random.default_rng(0)
    for u in range(50):
        seen = set(rng.choice(np.arange(1, 3001), 40, replace=False).tolist())
        pos = next(iter(seen))
        negs = sample_negatives(f"u{u}", "Y", pos, seen, 3000, 999, seed=4)
        assert len(set(negs)) == 999 and not (set(negs.tolist()) & seen)
        assert np.array_equal(negs, sample_negatives(f"u{u}", "Y", pos, seen, 3000, 999, seed=4))
    assert not np.array_equal(sample_negatives("u", "X", 1, [], 3000, seed=0),
                              sample_negatives("u", "X", 1, [], 3000, seed=1))


def test_small_catalog_is_fatal_and_shortfall_recorded():
    with pytest.raises(DataError):
        sample_negatives("u", "X", 1, [], 9)
    cand = build_candidates([make_user("u", tx=1, seen_x=(2, 3))], "X", 20, 999)
    assert cand.shortfall == 999 - 17 and cand.valid.sum() == 18


# ---------------------------------------------------------------- evaluate

def test_random_scorer_baseline():
    users = [make_user(f"u{i}", tx=1 + i % 500) for i in range(3000)]
    rep = evaluate(random_scorer(0), users, {"X": 2000, "Y": 2000})
    assert rep.metric("X", "all", "hr") == pytest.approx(1.0, abs=0.6)
    assert rep.cells[("Y", "all")].n_users == 0 and rep.metric("Y", "all") is None


def test_groups_and_empty_cells():
    users = [
        make_user("a", tx=1, ty=2, tags={"tailed_x"}),
        make_user("b", tx=3, ty=4, cold="Y", tags={"cold_start"}),
        make_user("c", ty=5),
    ]
    rep = evaluate(random_scorer(0), users, {"X": 50, "Y": 50}, n_neg=20)
    n = {k: c.n_users for k, c in rep.cells.items()}
    assert n[("X", "all")] == 2 and n[("Y", "all")] == 3
    assert n[("X", "tailed")] == 1 and n[("Y", "tailed")] == 0
    assert n[("Y", "cold_start")] == 1 and n[("X", "cold_start")] == 0
    for (d, g), c in rep.cells.items():
        assert c.n_users <= n[(d, "all")]
        if c.n_users:
            assert 0 <= c.hr_mean <= 100 and 0 <= c.ndcg_mean <= 100
        else:
            assert c.hr_mean is None
    # removing tags leaves 'all' as everyone with a target
    bare = [make_user(u.user_id, u.target_x, u.target_y) for u in users]
    rep2 = evaluate(random_scorer(0), bare, {"X": 50, "Y": 50}, n_neg=20)
    assert rep2.cells[("Y", "all")].n_users == 3 and rep2.cells[("X", "tailed")].n_users == 0


def test_perfect_scorer_and_determinism():
    users = [make_user(f"u{i}", tx=1 + i, ty=2 + i) for i in range(30)]

    def oracle(batch, d, cand):
        return (cand == np.array([u.target(d) for u in batch])[:, None]).astype(float)

    rep = evaluate(oracle, users, {"X": 100, "Y": 100})
    assert rep.metric("X", "all") == 100.0 and rep.metric("Y", "all", "hr") == 100.0
    a = evaluate(random_scorer(3), users, {"X": 100, "Y": 100}, seed=2)
    b = evaluate(random_scorer(3), users, {"X": 100, "Y": 100}, seed=2)
    assert a.to_json() == b.to_json()


def test_report_roundtrip_merge_and_table():
    users = [make_user(f"u{i}", tx=1 + i, ty=2 + i, tags={"tailed_x"}) for i in range(20)]
    reps = [evaluate(random_scorer(s), users, {"X": 60, "Y": 60}, seed=s) for s in range(3)]
    merged = merge_reports(reps)
    assert len(merged.cells[("X", "all")].ndcg) == 3
    again = EvalReport.from_dict(merged.to_dict())
    assert again.to_json() == merged.to_json()
    table = merged.format_table()
    assert "Cold-start" in table and "n/a" in table and "±" in table
