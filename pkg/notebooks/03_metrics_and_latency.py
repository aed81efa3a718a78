"""
Ranking metrics and the latency harness
=======================================

What P@K and MRR@K do with a few hand-placed ranks, what a scorer that
knows nothing gets, and how long a dense and a compressed model take to
score 100 sessions one at a time.
"""

# %%
import numpy as np

from sttdrec import FactorizedShape, ModelConfig, SessionRecModel
from sttdrec.metrics import label_ranks, latency_benchmark, metrics_from_ranks, rank_contributions

ranks = np.array([1, 3, 7, 12, 50])
for k in (5, 10):
    hit, rr = rank_contributions(ranks, k)
    print(f"k={k}  hits {hit}  reciprocal ranks {np.round(rr, 3)}")
print(metrics_from_ranks(ranks).format())

# %%
# random scores over 200 items: P@5 should sit near 5/200 = 2.5%
rng = np.random.default_rng(0)
V = 200
for n in (100, 1_000, 10_000):
    r = label_ranks(rng.random((n, V)), rng.integers(0, V, size=n))
    print(n, round(metrics_from_ranks(r)["P@5"], 3))

# %%
# ties are broken towards the lower item id, so a constant scorer is not
# accidentally perfect
flat = np.zeros((2, 5))
print(label_ranks(flat, np.array([0, 4])))

# %%
sessions = [rng.integers(0, V, size=rng.integers(1, 10)).tolist() for _ in range(50)]
shape = FactorizedShape((10, 20), (4, 8), 8, 2, num_items=V)
for mode in ("dense", "sttd"):
    cfg = ModelConfig(V, embed_dim=32, max_seq_len=10, dropout=0.0, embedding_mode=mode,
                      shape=shape if mode == "sttd" else None)
    res = latency_benchmark(SessionRecModel(cfg), sessions, repetitions=5)
    spread = max(res.runs) / min(res.runs) - 1
    print(f"{mode:>6}: {res.seconds_per_100:.4f} s per 100 sessions, spread {100 * spread:.0f}%")
