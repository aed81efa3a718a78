"""
Distilling a compressed student on synthetic sessions
=====================================================

A dense teacher learns a synthetic catalog with near-deterministic
transitions, then an STTD-compressed student is trained against it twice:
once with the full distillation objective and once on the plain
recommendation loss.  Sizes are cut down from the synthetic preset so the
whole script runs in about a minute.
"""

# %%
import math

from sttdrec import FactorizedShape, KDConfig, ModelConfig, SessionRecModel, compression_report
from sttdrec.data import synth_generate
from sttdrec.distill import distill, partition_hot_cold
from sttdrec.metrics import evaluate, long_tail_report
from sttdrec.training import train_supervised

bundle = synth_generate(100, 800, (3, 8), sharpness=math.inf, seed=0, cyclic=True)
print(bundle.format_statistics())

# %%
N = 16
teacher = SessionRecModel(ModelConfig(bundle.num_items, embed_dim=N, max_seq_len=8,
                                      dropout=0.0), seed=0)
fit = train_supervised(teacher, bundle.train_instances, bundle.valid_instances, epochs=15,
                       lr=3e-3, patience=3)
print(evaluate(teacher, bundle.test).format())
print("validation P@5 by epoch:", [round(h["val_P@5"], 1) for h in fit.history])

# %%
# 100 items as 10 x 10, 16 dims as 4 x 4; R=8 with n=2
shape = FactorizedShape((10, 10), (4, 4), 8, 2, num_items=bundle.num_items, embed_dim=N)
print(compression_report(shape))
scfg = ModelConfig(bundle.num_items, embed_dim=N, max_seq_len=8, dropout=0.0,
                   embedding_mode="sttd", shape=shape)
part = partition_hot_cold(bundle.popularity, 0.2)
print(f"{len(part.hot)} hot items, {len(part.cold)} cold")

# %%
results = {}
for name, cfg in [("full KD", KDConfig(lr=3e-3, epochs=15)),
                  ("plain", KDConfig(lr=3e-3, epochs=15).ablate(False, False, False))]:
    student = SessionRecModel(scfg, seed=1)
    run = distill(teacher, student, bundle.train_instances, bundle.valid_instances, part, cfg,
                  seed=1)
    results[name] = student
    print(f"{name}, {len(run.history)} epochs")
    print(evaluate(student, bundle.test).format())

# %%
# where do the hits come from: the 5% most clicked labels or the rest
for name, model in [("teacher", teacher)] + list(results.items()):
    print(name)
    print(long_tail_report(model, bundle.test, bundle.popularity).format())
