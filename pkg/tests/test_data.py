import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sttdrec.data import (
    DatasetBundle,
    FormatSpec,
    Preprocessed,
    augment_all,
    build_bundle,
    ingest,
    load_bundle,
    preprocess,
    save_bundle,
    sequence_split_augment,
    split,
    synth_generate,
    synth_sessions,
)


def write_csv(path, rows, header="session_key,item_key,timestamp"):
    path.write_text(header + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


# -- ingest ------------------------------------------------------------------------------

def test_ingest_groups_sessions(tmp_path):
    p = write_csv(tmp_path / "e.csv", [("s1", "a", 1), ("s2", "b", 5), ("s1", "c", 2)])
    assert ingest(p) == {"s1": ["a", "c"], "s2": ["b"]}


def test_ingest_sorts_by_time_and_keeps_ties_in_file_order(tmp_path):
    p = write_csv(tmp_path / "e.csv", [("s", "c", 30), ("s", "a", 10), ("s", "x", 20),
                                       ("s", "y", 20)])
    assert ingest(p)["s"] == ["a", "x", "y", "c"]


def test_ingest_keeps_consecutive_duplicates(tmp_path):
    p = write_csv(tmp_path / "e.csv", [("s", "a", 1), ("s", "a", 2), ("s", "b", 3)])
    assert ingest(p)["s"] == ["a", "a", "b"]


def test_ingest_reports_bad_line_number(tmp_path):
    p = write_csv(tmp_path / "e.csv", [("s", "a", 1), ("s", "b", "noon"), ("s", "c", 3)])
    with pytest.raises(ValueError, match=r":3:"):
        ingest(p)


def test_ingest_rejects_empty_file(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ValueError, match="empty"):
        ingest(tmp_path / "e.csv")


def test_ingest_rejects_missing_column(tmp_path):
    p = write_csv(tmp_path / "e.csv", [("s", "a")], header="session_key,item_key")
    with pytest.raises(ValueError, match="timestamp"):
        ingest(p)


def test_ingest_custom_delimiter(tmp_path):
    (tmp_path / "e.tsv").write_text("session_key\titem_key\ttimestamp\ns\ta\t1\ns\tb\t0\n")
    assert ingest(tmp_path / "e.tsv", FormatSpec(delimiter="\t"))["s"] == ["b", "a"]


# -- preprocess -----------------------------------------------------------------------------

def test_item_below_five_occurrences_is_removed():
    raw = {f"s{k}": ["a", "b"] for k in range(5)}
    raw["s5"] = ["a", "rare", "b"]
    raw["s6"] = ["rare", "rare", "rare"]
    pre = preprocess(raw)
    assert "rare" not in pre.vocab
    assert pre.sessions[pre.session_keys.index("s5")] == [0, 1]


def test_session_shrunk_to_one_item_is_dropped():
    raw = {f"s{k}": ["a", "b"] for k in range(5)}
    raw["short"] = ["a", "rare"]
    pre = preprocess(raw)
    assert "short" not in pre.session_keys


def test_clean_input_only_reindexed():
    raw = {f"s{k}": ["x", "y", "z"][k % 2:] for k in range(10)}
    pre = preprocess(raw)
    assert pre.vocab == ["x", "y", "z"]
    assert [[pre.vocab[i] for i in s] for s in pre.sessions] == list(raw.values())
    again = preprocess({k: [pre.vocab[i] for i in s] for k, s in zip(pre.session_keys, pre.sessions)})
    assert again.sessions == pre.sessions


def test_everything_filtered_is_an_error():
    with pytest.raises(ValueError, match="filtered"):
        preprocess({"s": ["a", "b"]})


def test_single_pass_can_leave_items_under_the_threshold():
    # "b" has 5 occurrences before the session filter, but one of them sat in a
    # session that the length filter removes afterwards
    raw = {f"s{k}": ["a", "b"] for k in range(4)}
    raw["lonely"] = ["b", "rare"]
    raw["more_a"] = ["a", "a"]
    pre = preprocess(raw)
    counts = Counter(v for s in pre.sessions for v in s)
    assert counts[pre.vocab.index("b")] == 4


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text("abc", min_size=1, max_size=3),
                       st.lists(st.sampled_from("pqrstuvw"), min_size=1, max_size=8),
                       min_size=1, max_size=40))
def test_preprocess_invariants(raw):
    try:
        pre = preprocess(raw)
    except ValueError:
        return
    assert all(len(s) >= 2 for s in pre.sessions)
    # counts measured after the item filter (before sessions are dropped) are >= 5
    kept_items = set(pre.vocab)
    after_item_filter = Counter(v for s in raw.values() for v in s if v in kept_items)
    assert min(after_item_filter.values()) >= 5
    assert sorted({i for s in pre.sessions for i in s}) == list(range(len(pre.vocab)))


# -- split and augmentation -------------------------------------------------------------------

def test_last_item_is_the_test_label():
    pre = Preprocessed(["s"], [[0, 1, 2]], ["a", "b", "c"])
    b = split(pre, val_fraction=0.0)
    assert b.test == [([0, 1], 2)]
    assert b.train == [[0, 1]]
    assert b.train_instances == [([0], 1)]


def test_validation_is_ten_percent_and_seeded():
    pre = Preprocessed([f"s{k}" for k in range(100)], [[k % 7, 7, 8, 9] for k in range(100)],
                       [str(v) for v in range(10)])
    a = split(pre, seed=3)
    b = split(pre, seed=3)
    c = split(pre, seed=4)
    assert len(a.valid) == 10 and len(a.train) == 90
    assert a.valid == b.valid and a == b
    assert a.valid_instances != c.valid_instances or a.valid != c.valid


def test_augment_examples():
    assert sequence_split_augment(["a", "b"]) == [(["a"], "b")]
    assert sequence_split_augment(list("abcd")) == [(["a"], "b"), (["a", "b"], "c"),
                                                   (["a", "b", "c"], "d")]
    with pytest.raises(ValueError):
        sequence_split_augment(["a"])


@given(st.lists(st.lists(st.integers(0, 50), min_size=2, max_size=10), max_size=20))
def test_augment_count_identity(sessions):
    inst = augment_all(sessions)
    assert len(inst) == sum(len(s) - 1 for s in sessions)
    for prefix, label in inst:
        assert set(prefix) | {label} <= {v for s in sessions for v in s}
    # labels are the original next items
    pos = 0
    for s in sessions:
        for t in range(1, len(s)):
            assert inst[pos] == (s[:t], s[t])
            pos += 1


def test_popularity_from_training_only():
    pre = Preprocessed(["s1", "s2"], [[0, 1, 2], [0, 2, 1]], ["a", "b", "c"])
    b = split(pre, val_fraction=0.0)
    np.testing.assert_array_equal(b.popularity, [2, 1, 1])


def test_statistics_recomputed():
    pre = Preprocessed(["s1", "s2"], [[0, 1, 2], [0, 1]], ["a", "b", "c"])
    b = split(pre, val_fraction=0.0)
    st_ = b.statistics()
    assert st_ == {"train_sessions": 1, "valid_sessions": 0, "test_sessions": 2, "items": 3,
                   "avg_length": 2.5}
    b.test.append(([0, 1, 2, 0], 1))
    assert b.statistics()["avg_length"] == pytest.approx((3 + 2 + 5) / 3)


# -- bundle file ------------------------------------------------------------------------------

def test_bundle_roundtrip_and_determinism(tmp_path):
    b = synth_generate(30, 200, seed=1)
    save_bundle(b, tmp_path / "a.bin")
    save_bundle(synth_generate(30, 200, seed=1), tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    back = load_bundle(tmp_path / "a.bin")
    assert back == b
    assert back.vocab == b.vocab and back.test == b.test


def test_bundle_rejects_other_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage!" * 4)
    with pytest.raises(ValueError):
        load_bundle(tmp_path / "x.bin")


# -- synthetic data -------------------------------------------------------------------------------

def test_synth_same_seed_same_bundle():
    assert synth_generate(50, 300, seed=9) == synth_generate(50, 300, seed=9)
    assert synth_generate(50, 300, seed=9) != synth_generate(50, 300, seed=10)


@pytest.mark.parametrize("cyclic", [True, False])
def test_infinite_sharpness_makes_transitions_deterministic(cyclic):
    raw = synth_sessions(40, 300, sharpness=float("inf"), seed=2, cyclic=cyclic)
    nxt = {}
    for items in raw.values():
        for a, b in zip(items, items[1:]):
            assert nxt.setdefault(a, b) == b


def test_low_sharpness_branches():
    raw = synth_sessions(40, 500, sharpness=0.0, seed=2)
    succ = {}
    for items in raw.values():
        for a, b in zip(items, items[1:]):
            succ.setdefault(a, set()).add(b)
    assert max(len(v) for v in succ.values()) > 1


def test_default_skew_is_long_tailed():
    b = synth_generate(200, 2000, seed=0)
    pop = np.sort(b.popularity)[::-1]
    top = int(round(0.2 * len(pop)))
    assert pop[:top].sum() / pop.sum() >= 0.6


def test_synth_rejects_tiny_catalog():
    with pytest.raises(ValueError, match="num_items"):
        synth_sessions(5, 10)


def test_vocabulary_covers_all_splits():
    b = synth_generate(60, 400, seed=5)
    ids = {v for s in b.train + b.valid for v in s} | {v for s, y in b.test for v in s + [y]}
    assert ids <= set(range(b.num_items))


@pytest.mark.skipif(not os.environ.get("STTDREC_TMALL_CSV"),
                    reason="external Tmall event log not available")
def test_tmall_statistics():
    b = build_bundle(ingest(os.environ["STTDREC_TMALL_CSV"]))
    st_ = b.statistics()
    assert st_["items"] == 40728
    assert st_["train_sessions"] + st_["valid_sessions"] == 351268
    assert round(st_["avg_length"], 2) == 6.69
