import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrnp.data import (
    DataError,
    DomainDataset,
    Interaction,
    ParseError,
    SplitError,
    build_history,
    compute_overlap,
    filter_min_count,
    load_ratings,
    split_cold_start,
    write_ratings,
    write_split_manifest,
)


def _write(tmp_path, lines, name="r.csv"):
    p = tmp_path / name
    p.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return p


def test_load_small_file(tmp_path):
    p = _write(tmp_path, ["a,i1,4.0,10", "a,i2,3.0,5", "b,i1,5.0,7"])
    ds = load_ratings(p, "source", min_count=1)
    assert ds.n_users == 2
    assert len(ds) == 3
    assert ds.user_ids == ["a", "b"]
    assert ds.item_ids == ["i1", "i2"]
    # per-user records in time order
    a = ds.user_slice(ds.user_index["a"])
    assert list(ds.timestamps[a]) == [5, 10]


def test_rating_out_of_range(tmp_path):
    p = _write(tmp_path, ["u1,i1,7.0,100"])
    with pytest.raises(DataError, match="outside"):
        load_ratings(p, "source", min_count=1)


def test_malformed_record_reports_line(tmp_path):
    p = _write(tmp_path, ["u1,i1,4.0,100", "u2,i1,4.0"])
    with pytest.raises(ParseError, match=":2:"):
        load_ratings(p, "source", min_count=1)


def test_unparseable_rating(tmp_path):
    p = _write(tmp_path, ["u1,i1,good,100"])
    with pytest.raises(ParseError):
        load_ratings(p, "target", min_count=1)


def test_negative_timestamp_rejected():
    with pytest.raises(DataError):
        Interaction("u", "i", 3.0, -1)


def test_reload_gives_identical_indexing(tmp_path):
    p = _write(tmp_path, ["c,x,1,3", "a,y,2,1", "b,x,3,2", "a,x,4,0"])
    a = load_ratings(p, "source", min_count=1)
    b = load_ratings(p, "source", min_count=1)
    assert a.user_ids == b.user_ids == ["c", "a", "b"]
    assert a.item_ids == b.item_ids
    np.testing.assert_array_equal(a.items, b.items)


def test_min_count_iterates_to_fixpoint():
    # dropping item z (1 rating) leaves user b with only 1 rating, so b goes too
    recs = [Interaction("a", "x", 1, 0), Interaction("a", "y", 1, 1),
            Interaction("b", "x", 1, 2), Interaction("b", "z", 1, 3),
            Interaction("c", "x", 1, 4), Interaction("c", "y", 1, 5)]
    kept = filter_min_count(recs, 2)
    assert {r.user_id for r in kept} == {"a", "c"}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), max_size=80), st.integers(1, 4))
def test_min_count_fixpoint_property(pairs, k):
    recs = [Interaction(f"u{u}", f"i{i}", 3.0, n) for n, (u, i) in enumerate(pairs)]
    kept = filter_min_count(recs, k)
    users, items = {}, {}
    for r in kept:
        users[r.user_id] = users.get(r.user_id, 0) + 1
        items[r.item_id] = items.get(r.item_id, 0) + 1
    assert all(c >= k for c in users.values())
    assert all(c >= k for c in items.values())


def test_overlap():
    s = DomainDataset([Interaction(u, "i", 3, 0) for u in "abc"], "source")
    t = DomainDataset([Interaction(u, "j", 3, 0) for u in "bcd"], "target")
    assert compute_overlap(s, t) == (["b", "c"], ["a"])


def test_overlap_disjoint_then_split_fails():
    s = DomainDataset([Interaction("a", "i", 3, 0)], "source")
    t = DomainDataset([Interaction("b", "j", 3, 0)], "target")
    overlap, _ = compute_overlap(s, t)
    assert overlap == []
    with pytest.raises(SplitError):
        split_cold_start(overlap, 0.2, 0)


def test_split_sizes():
    users = [f"u{i:03d}" for i in range(100)]
    sp = split_cold_start(users, 0.2, 7)
    assert len(sp.test_users) == 20 and len(sp.train_users) == 80


def test_split_floor_large_count():
    users = [str(i) for i in range(18031)]
    sp = split_cold_start(users, 0.5, 0)
    assert (len(sp.test_users), len(sp.train_users)) == (9015, 9016)


def test_split_deterministic():
    users = [f"u{i}" for i in range(50)]
    assert split_cold_start(users, 0.3, 5) == split_cold_start(users, 0.3, 5)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
def test_split_rejects_alpha(alpha):
    with pytest.raises(SplitError):
        split_cold_start(["a", "b"], alpha, 0)


@settings(max_examples=1000, deadline=None)
@given(st.integers(2, 60), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_split_partitions_overlap(n, alpha, seed):
    users = [f"u{i}" for i in range(n)]
    sp = split_cold_start(users, alpha, seed)
    assert set(sp.train_users) | set(sp.test_users) == set(users)
    assert not set(sp.train_users) & set(sp.test_users)
    assert len(sp.test_users) == math.floor(alpha * n)


def test_split_manifest(tmp_path):
    sp = split_cold_start(["a", "b", "c", "d"], 0.5, 0)
    write_split_manifest(sp, tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text().split() == list(sp.test_users)


def _history_ds(n):
    return DomainDataset([Interaction("u", f"i{k}", 1.0 + k % 4, 1000 - k) for k in range(n)], "source")


def test_history_short_user_in_time_order():
    ds = _history_ds(3)
    h = build_history(ds, "u", 20)
    assert [ds.item_ids[i] for i in h.items] == ["i2", "i1", "i0"]


def test_history_keeps_latest():
    ds = _history_ds(25)
    h = build_history(ds, "u", 20)
    assert len(h.items) == 20
    # the newest record (largest timestamp) is i0 and stays last
    assert ds.item_ids[h.items[-1]] == "i0"
    assert ds.item_ids[h.items[0]] == "i19"


def test_history_unknown_user():
    with pytest.raises(KeyError):
        build_history(_history_ds(2), "nobody", 20)


def test_write_then_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [Interaction(f"u{rng.integers(5)}", f"i{rng.integers(4)}", float(rng.uniform(0, 5)), int(t))
            for t in range(40)]
    ds = DomainDataset(recs, "target")
    write_ratings(ds, tmp_path / "t.csv")
    back = load_ratings(tmp_path / "t.csv", "target", min_count=1)
    assert back.interactions() == ds.interactions()
