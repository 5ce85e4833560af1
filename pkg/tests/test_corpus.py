import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imvae.corpus import (
    PAD, UserSplit, build_examples, downsample_log, ingest_ratings, load_examples, make_log,
    save_examples, simulate_cold_start, split_users, tag_user_groups, tailed_threshold,
)
from imvae.errors import DataError, MissingArtifactError

from conftest import toy_logs


def _split(seqs_x, seqs_y, role=None, cold=None, dropped=None):
    users = sorted(set(seqs_x) | set(seqs_y))
    return UserSplit(
        role_of_user={u: (role or {}).get(u, "train") for u in users},
        overlap_flag={u: u in seqs_x and u in seqs_y for u in users},
        cold_start_domain={u: (cold or {}).get(u) for u in users},
        dropped_domain={u: (dropped or {}).get(u) for u in users},
        sequences_x={u: tuple(s) for u, s in seqs_x.items()},
        sequences_y={u: tuple(s) for u, s in seqs_y.items()},
        items_x=tuple(sorted({i for s in seqs_x.values() for i in s})),
        items_y=tuple(sorted({i for s in seqs_y.values() for i in s})),
    )


# ------------------------------------------------------------------ ingestion

def test_ingest_sorts_by_timestamp(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("u,i2,5,3\nu,i1,4,5\n")
    log = ingest_ratings(p, "X")
    assert log.sequences()["u"] == ("i2", "i1")


def test_ingest_dedup_keeps_first(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("user,item,rating,ts\nu,a,5,1\nu,a,5,1\nu,b,3,2\n")
    log = ingest_ratings(p, "X")
    assert log.n_duplicates == 1
    assert log.sequences()["u"] == ("a", "b")


def test_timestamp_ties_keep_file_order():
    log = make_log([("u", "c", 7), ("u", "a", 7), ("u", "b", 1)], "X")
    assert log.sequences()["u"] == ("b", "c", "a")


def test_ingest_tsv_and_stats(tmp_path):
    p = tmp_path / "y.tsv"
    p.write_text("u1\ta\t5\t1\nu1\tb\t5\t2\nu2\ta\t1\t3\n")
    s = ingest_ratings(p, "Y").stats()
    assert (s["n_users"], s["n_items"], s["n_interactions"]) == (2, 2, 3)
    assert s["density"] == pytest.approx(3 / 4)
    assert s["mean_seq_len"] == pytest.approx(1.5)


def test_ingest_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        ingest_ratings(tmp_path / "nope.csv", "X")
    empty = tmp_path / "empty.csv"
    empty.write_text("user,item,rating,ts\n")
    with pytest.raises(DataError, match="no records"):
        ingest_ratings(empty, "X")
    bad = tmp_path / "bad.csv"
    bad.write_text("".join(f"u{i},a,5,{i}\n" for i in range(50)) + "junk line\n")
    with pytest.raises(DataError, match="line"):
        ingest_ratings(bad, "X")


def test_ingest_tolerates_under_one_percent(tmp_path):
    p = tmp_path / "ok.csv"
    p.write_text("".join(f"u{i},a,5,{i}\n" for i in range(200)) + "broken,row\n")
    log = ingest_ratings(p, "X")
    assert log.n_malformed == 1 and len(log.records) == 200


# ------------------------------------------------------------------ splits

def test_split_ratios_and_determinism():
    lx, ly = toy_logs(n_users=200)
    a = split_users(lx, ly, seed=5)
    b = split_users(lx, ly, seed=5)
    assert a.to_json() == b.to_json()
    roles = list(a.role_of_user.values())
    assert abs(roles.count("train") - 160) <= 1
    assert abs(roles.count("valid") - 20) <= 1
    assert abs(roles.count("test") - 20) <= 1


def test_k_o_one_keeps_everything():
    lx, ly = toy_logs()
    split = split_users(lx, ly, k_o=1.0)
    assert all(v is None for v in split.dropped_domain.values())


def test_k_o_quarter_drops_exactly_75_of_100():
    # 125 overlapping users -> 100 of them land in training under an 80% split
    lx, ly = toy_logs(n_users=125, overlap=1.0)
    split = split_users(lx, ly, k_o=0.25, seed=0)
    train_overlap = [u for u, r in split.role_of_user.items() if r == "train" and split.overlap_flag[u]]
    assert len(train_overlap) == 100
    dropped = [u for u, d in split.dropped_domain.items() if d is not None]
    assert len(dropped) == 75
    assert all(split.role_of_user[u] == "train" for u in dropped)


def test_split_needs_ten_users():
    lx, ly = toy_logs(n_users=8, overlap=1.0)
    with pytest.raises(DataError):
        split_users(lx, ly)


def test_cold_start_counts():
    lx, ly = toy_logs(n_users=500, overlap=1.0)
    split = split_users(lx, ly, seed=0)
    assert all(v is None for v in simulate_cold_start(split, 0.0, 0).cold_start_domain.values())
    cold = simulate_cold_start(split, 0.2, 0)
    test_users = [u for u, r in split.role_of_user.items() if r == "test"]
    assert len(test_users) == 50
    assert sum(cold.cold_start_domain[u] is not None for u in test_users) == 10
    for u, d in cold.cold_start_domain.items():
        if d is not None:
            assert cold.role_of_user[u] in ("valid", "test") and cold.overlap_flag[u]


def test_cold_start_without_candidates_is_fatal():
    lx, ly = toy_logs(n_users=60, overlap=0.0)
    split = split_users(lx, ly)
    with pytest.raises(DataError):
        simulate_cold_start(split, 0.5, 0)


def test_split_json_roundtrip():
    lx, ly = toy_logs()
    split = simulate_cold_start(split_users(lx, ly, k_o=0.5, seed=2), 0.5, 2)
    again = UserSplit.from_json(split.to_json())
    assert again == split


# ------------------------------------------------------------------ examples

def test_padding_and_target():
    split = _split({"u": ["a", "b"]}, {"u": ["p"]})
    (e,) = build_examples(split, 4)
    a = 1
    assert e.seq_x == (PAD, PAD, PAD, a) and e.target_x == 2 and e.true_len_x == 1
    # single Y interaction: target only
    assert e.seq_y == (PAD,) * 4 and e.target_y == 1 and e.true_len_y == 0


def test_most_recent_T():
    split = _split({"u": ["a", "b", "c", "d"]}, {})
    (e,) = build_examples(split, 2)
    assert e.seq_x == (2, 3) and e.target_x == 4


def test_cold_start_example():
    split = _split({"u": ["a", "b", "c"]}, {"u": ["p", "q"]}, role={"u": "test"}, cold={"u": "X"})
    (e,) = build_examples(split, 5)
    assert e.true_len_x == 0 and e.target_x == 3 and e.seq_x == (PAD,) * 5
    assert "cold_start" in e.tags


def test_missing_domain_has_no_target():
    split = _split({"u": ["a", "b"]}, {"v": ["p", "q"]})
    ex = {e.user_id: e for e in build_examples(split, 3)}
    assert ex["u"].target_y is None and ex["u"].true_len_y == 0
    assert ex["u"].seq_y == (PAD,) * 3


def test_T_must_be_at_least_two():
    with pytest.raises(DataError):
        build_examples(_split({"u": ["a"]}, {}), 1)


def test_tailed_threshold_example():
    assert tailed_threshold([1, 2, 3, 4, 10]) == 2.5


def _len_examples(lengths):
    seqs = {f"u{i}": [f"i{j}" for j in range(n + 1)] for i, n in enumerate(lengths)}
    return build_examples(_split(seqs, {}), max(lengths) + 1)


def test_tagging_examples():
    tagged = tag_user_groups(_len_examples([1, 2, 3, 4, 10]), "X")
    tailed = sorted(e.true_len_x for e in tagged if "tailed_x" in e.tags)
    assert tailed == [1, 2]
    assert not any("tailed_x" in e.tags for e in tag_user_groups(_len_examples([3, 3, 3]), "X"))
    assert not any("tailed_x" in e.tags for e in tag_user_groups(_len_examples([4]), "X"))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=40))
def test_tailed_threshold_matches_bruteforce(lengths):
    n = len(lengths)
    k = max(1, int(np.floor(0.8 * n)))
    expect = np.mean(sorted(lengths)[:k])
    assert tailed_threshold(lengths) == pytest.approx(expect)


def test_example_invariants(small_examples):
    split, examples = small_examples
    T = 6
    for e in examples:
        for d in ("X", "Y"):
            seq = e.seq(d)
            assert len(seq) == T
            n = e.true_len(d)
            assert seq[: T - n] == (PAD,) * (T - n)
            assert PAD not in seq[T - n:]
            if e.target(d) is not None:
                assert e.target(d) not in e.inputs(d)
        if "cold_start" in e.tags:
            d = e.cold_start_domain
            assert e.true_len(d) == 0 and e.target(d) is not None
            assert e.role in ("valid", "test")


def test_reconstruction(small_examples):
    split, examples = small_examples
    T = 6
    for e in examples:
        for d, vocab in (("X", split.items_x), ("Y", split.items_y)):
            hist = split.sequences(d).get(e.user_id, ())
            if split.dropped_domain[e.user_id] == d or not hist:
                continue
            idx = [vocab.index(i) + 1 for i in hist]
            if e.cold_start_domain == d:
                assert e.target(d) == idx[-1]
            else:
                assert list(e.inputs(d)) + [e.target(d)] == (idx[:-1][-T:] + idx[-1:])


def test_example_store_roundtrip(tmp_path, small_examples):
    _, examples = small_examples
    examples = tuple(replace(e, pseudo_x=(PAD, 1, 2), pseudo_y=(3, 4, 5)) for e in examples)
    p = tmp_path / "ex.npz"
    save_examples(p, examples)
    assert load_examples(p) == examples
    save_examples(tmp_path / "again.npz", examples)
    assert (tmp_path / "again.npz").read_bytes() == p.read_bytes()


def test_downsample_record_level():
    lx, _ = toy_logs(n_users=100)
    half = downsample_log(lx, 0.5, 0)
    assert len(half.records) == round(0.5 * len(lx.records))
    assert set(half.records) <= set(lx.records)
    assert downsample_log(lx, 0.5, 0) == half
    with pytest.raises(DataError):
        downsample_log(lx, 0.0, 0)
