"""Ranking metrics, long-tail breakdown and the latency harness."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import no_grad

DEFAULT_KS = (5, 10)


@dataclass
class MetricTable:
    values: dict[str, float]
    count: int

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def format(self) -> str:
        keys = list(self.values)
        head = "  ".join(f"{k:>8}" for k in keys)
        row = "  ".join(f"{self.values[k]:8.2f}" for k in keys)
        return f"{head}\n{row}\n(n={self.count})"

    def to_tsv(self) -> str:
        keys = list(self.values)
        return "\t".join(keys + ["count"]) + "\n" + \
            "\t".join([f"{self.values[k]:.6f}" for k in keys] + [str(self.count)]) + "\n"


def label_ranks(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """1-based rank of each label; ties are broken by ascending item id."""
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=np.int64)
    target = scores[np.arange(len(labels)), labels][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    ahead = (scores > target) | ((scores == target) & (ids < labels[:, None]))
    return 1 + ahead.sum(axis=1)


def rank_contributions(ranks: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance (hit, reciprocal rank) at cutoff ``k``; both 0 beyond ``k``."""
    ranks = np.asarray(ranks)
    hit = (ranks <= k).astype(float)
    return hit, np.where(ranks <= k, 1.0 / ranks, 0.0)


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int] = DEFAULT_KS) -> MetricTable:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no instances to evaluate")
    values = {}
    for k in ks:
        hit, rr = rank_contributions(ranks, k)
        values[f"P@{k}"] = float(100.0 * hit.mean())
        values[f"MRR@{k}"] = float(100.0 * rr.mean())
    return MetricTable(values, int(ranks.size))


def predict_scores(model, sessions: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    """Full-catalog logits (softmax is monotone, so ranks are unaffected)."""
    from .model import pad_sessions

    out = []
    with no_grad():
        table = model.item_table()
        for start in range(0, len(sessions), batch_size):
            batch = pad_sessions(sessions[start:start + batch_size], model.config.max_seq_len)
            rep = model.represent(batch, table, training=False)
            out.append(model.logits(rep.theta, table).data)
    return np.concatenate(out, axis=0)


def evaluate(model, instances: Sequence[tuple[Sequence[int], int]],
             ks: Sequence[int] = DEFAULT_KS, batch_size: int = 256) -> MetricTable:
    if not instances:
        raise ValueError("no test instances")
    sessions = [s for s, _ in instances]
    labels = np.array([y for _, y in instances], dtype=np.int64)
    return metrics_from_ranks(label_ranks(predict_scores(model, sessions, batch_size), labels), ks)


def top_items(popularity: np.ndarray, fraction: float) -> np.ndarray:
    """Ids of the ``round(fraction * |V|)`` most popular items (ties: lower id first)."""
    popularity = np.asarray(popularity)
    k = int(np.floor(fraction * len(popularity) + 0.5))
    order = np.lexsort((np.arange(len(popularity)), -popularity))
    return np.sort(order[:k])


@dataclass
class LongTailReport:
    popular_items: np.ndarray
    counts: dict[str, int]
    precision: dict[str, float | None]
    """P@K inside each bucket (None for an empty bucket)."""
    contribution: dict[str, float]
    """Hits of the bucket divided by all instances, x100; sums to the overall P@K."""
    share: dict[str, float | None]
    """Fraction of all hits that fall in the bucket."""
    k: int = 5

    def format(self) -> str:
        lines = [f"{'bucket':<10}{'count':>8}{'P@' + str(self.k):>10}{'contrib':>10}{'share':>8}"]
        for b in ("popular", "long_tail"):
            p = self.precision[b]
            s = self.share[b]
            lines.append(f"{b:<10}{self.counts[b]:>8}"
                         f"{'absent' if p is None else f'{p:.2f}':>10}"
                         f"{self.contribution[b]:>10.2f}"
                         f"{'-' if s is None else f'{s:.3f}':>8}")
        return "\n".join(lines)


def long_tail_report(model, instances, popularity: np.ndarray, popular_fraction: float = 0.05,
                     k: int = 5, scores: np.ndarray | None = None) -> LongTailReport:
    labels = np.array([y for _, y in instances], dtype=np.int64)
    if scores is None:
        scores = predict_scores(model, [s for s, _ in instances])
    hits = label_ranks(scores, labels) <= k
    popular = top_items(popularity, popular_fraction)
    in_pop = np.isin(labels, popular)
    total = len(labels)
    total_hits = int(hits.sum())
    counts, precision, contribution, share = {}, {}, {}, {}
    for name, sel in (("popular", in_pop), ("long_tail", ~in_pop)):
        counts[name] = int(sel.sum())
        h = int(hits[sel].sum())
        precision[name] = 100.0 * h / counts[name] if counts[name] else None
        contribution[name] = 100.0 * h / total
        share[name] = h / total_hits if total_hits else None
    return LongTailReport(popular, counts, precision, contribution, share, k)


@dataclass
class LatencyResult:
    seconds_per_100: float
    runs: list[float] = field(default_factory=list)


def latency_benchmark(model, sessions: Sequence[Sequence[int]], repetitions: int = 5,
                      per: int = 100, top_k: int = 10, warmup: bool = True) -> LatencyResult:
    """Median wall time of ``per`` sequential single-session predictions.

    Sessions are cycled when fewer than ``per`` are given.  BLAS is pinned
    to one thread for the duration.
    """
    from threadpoolctl import threadpool_limits

    from .model import pad_sessions

    if not sessions:
        raise ValueError("no sessions to time")
    batch = [sessions[i % len(sessions)] for i in range(per)]

    def one_pass():
        with no_grad():
            for s in batch:
                b = pad_sessions([s], model.config.max_seq_len)
                _, probs = model.forward(b, training=False)
                np.argpartition(-probs.data[0], top_k - 1)[:top_k]

    runs = []
    with threadpool_limits(limits=1):
        if warmup:
            one_pass()
        for _ in range(repetitions):
            t0 = time.perf_counter()
            one_pass()
            runs.append(time.perf_counter() - t0)
    return LatencyResult(statistics.median(runs), runs)
