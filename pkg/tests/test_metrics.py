import math

import numpy as np
import pytest

from sttdrec.metrics import (
    label_ranks,
    latency_benchmark,
    long_tail_report,
    metrics_from_ranks,
    rank_contributions,
    top_items,
)
from sttdrec.model import ModelConfig, SessionRecModel


def test_rank_one_everywhere():
    t = metrics_from_ranks(np.ones(7, dtype=int))
    assert t["P@5"] == t["MRR@5"] == t["P@10"] == t["MRR@10"] == 100.0


def test_rank_seven_contributions():
    hit5, rr5 = rank_contributions(np.array([7]), 5)
    hit10, rr10 = rank_contributions(np.array([7]), 10)
    assert (hit5[0], rr5[0], hit10[0], rr10[0]) == (0.0, 0.0, 1.0, 1 / 7)
    t = metrics_from_ranks(np.array([7]))
    assert (t["P@5"], t["MRR@5"], t["P@10"]) == (0.0, 0.0, 100.0)
    assert t["MRR@10"] == pytest.approx(100 / 7, rel=1e-15)


def test_label_rank_ties_go_to_lower_id():
    scores = np.array([[0.5, 0.5, 0.5, 0.1]])
    assert label_ranks(scores, np.array([0]))[0] == 1
    assert label_ranks(scores, np.array([2]))[0] == 3
    assert label_ranks(scores, np.array([3]))[0] == 4


def test_ranks_invariant_under_monotone_transform(rng):
    s = rng.normal(size=(50, 30))
    y = rng.integers(0, 30, size=50)
    r = label_ranks(s, y)
    np.testing.assert_array_equal(r, label_ranks(np.exp(3 * s) + 2, y))
    np.testing.assert_array_equal(r, label_ranks(np.round(s, 1) * 0 + s, y))


def test_metric_invariants(rng):
    ranks = rng.integers(1, 40, size=500)
    t = metrics_from_ranks(ranks, ks=(1, 5, 10, 20))
    assert 0 <= t["P@5"] <= t["P@10"] <= t["P@20"] <= 100
    assert t["MRR@5"] <= t["MRR@10"] <= t["MRR@20"]
    for k in (1, 5, 10, 20):
        assert t[f"MRR@{k}"] <= t[f"P@{k}"]


def test_random_scorer_precision_expectation():
    V, n = 200, 10_000
    rng = np.random.default_rng(11)
    scores = rng.random((n, V))
    labels = rng.integers(0, V, size=n)
    p = metrics_from_ranks(label_ranks(scores, labels))["P@5"]
    q = 5 / V
    sigma = 100 * math.sqrt(q * (1 - q) / n)
    assert abs(p - 500 / V) < 3 * sigma


def test_empty_rank_list_rejected():
    with pytest.raises(ValueError):
        metrics_from_ranks(np.array([]))


def test_top_items_count_and_ties():
    pop = np.array([3, 9, 9, 1, 0, 2, 2, 2, 2, 2] * 2)
    top = top_items(pop, 0.05)
    assert list(top) == [1]


def _fake_scores(instances, V, hit_labels):
    scores = np.zeros((len(instances), V))
    for row, (_, y) in enumerate(instances):
        if y in hit_labels:
            scores[row, y] = 1.0
        else:
            scores[row, (y + 1) % V] = 1.0
            scores[row, y] = -1.0
    return scores


def test_long_tail_buckets_partition_instances():
    V = 40
    pop = np.arange(V)[::-1].copy()           # item 0 most popular
    instances = [([1], y) for y in (0, 1, 2, 5, 10, 20, 30, 39)]
    scores = _fake_scores(instances, V, hit_labels={0, 5, 39})
    rep = long_tail_report(None, instances, pop, scores=scores)
    assert list(rep.popular_items) == [0, 1]
    assert rep.counts == {"popular": 2, "long_tail": 6}
    assert rep.precision["popular"] == 50.0
    assert rep.precision["long_tail"] == pytest.approx(100 * 2 / 6)
    assert rep.contribution["popular"] + rep.contribution["long_tail"] == pytest.approx(100 * 3 / 8)
    assert rep.share["popular"] == pytest.approx(1 / 3)


def test_long_tail_empty_bucket_reported_absent():
    V = 40
    pop = np.arange(V)[::-1].copy()
    instances = [([3], 0), ([3], 1)]
    rep = long_tail_report(None, instances, pop, scores=_fake_scores(instances, V, {0, 1}))
    assert rep.counts["long_tail"] == 0 and rep.precision["long_tail"] is None
    assert "absent" in rep.format()


def test_latency_cycles_sessions_and_reports_median():
    m = SessionRecModel(ModelConfig(30, embed_dim=8, max_seq_len=5, dropout=0.0))
    res = latency_benchmark(m, [[1, 2], [3]], repetitions=3, per=20)
    assert len(res.runs) == 3
    assert res.seconds_per_100 == sorted(res.runs)[1]
    with pytest.raises(ValueError):
        latency_benchmark(m, [], repetitions=1)
