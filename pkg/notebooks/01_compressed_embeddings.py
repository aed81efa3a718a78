"""
Compressed embedding tables
===========================

Builds a small factorized table three ways (dense, TT cores, STTD cores),
checks that single-row lookups agree with the fully materialized table,
and prints how the parameter count moves with the rank R and the divisor n.
"""

# %%
import numpy as np

from sttdrec import FactorizedShape, Mode, compression_report
from sttdrec.tt_compress import grid_shape, init_cores, materialize_table, sttd_lookup, tt_lookup

# 200 items as 10 x 20, an 8-dim embedding as 2 x 4
shape = FactorizedShape((10, 20), (2, 4), rank=4, stp_divisor=2, num_items=200)
for mode in (Mode.TTD, Mode.STTD):
    s = shape if mode is Mode.STTD else FactorizedShape((10, 20), (2, 4), 4, 1, num_items=200)
    print(mode.value, compression_report(s, mode))

# %%
# lookups never build the table; compare them against it anyway
rng = np.random.default_rng(0)
cores = init_cores(shape, Mode.STTD, rng, dtype=np.float64, scale=1.0)
table = materialize_table(cores)
err = max(np.abs(sttd_lookup(cores, i) - table[i]).max() for i in range(shape.num_items))
print(f"STTD lookup vs table: max abs diff {err:.2e}")

tt = init_cores(FactorizedShape((10, 20), (2, 4), 4, 1, num_items=200), Mode.TTD, rng,
                dtype=np.float64, scale=1.0)
tt_table = materialize_table(tt)
print("TT lookup vs table:", max(np.abs(tt_lookup(tt, i) - tt_table[i]).max() for i in range(200)))

# %%
# The reference grid: items (10,10,25,8), dims (4,4,4,2)
print(f"{'R':>3} {'TT size':>8} {'TT rate':>8} {'STTD size':>10} {'STTD rate':>10}")
for r in (4, 8, 16, 32):
    a = compression_report(grid_shape(r, 1), Mode.TTD)
    b = compression_report(grid_shape(r, 2), Mode.STTD)
    print(f"{r:>3} {a.params_compressed:>8} {a.rounded_rate:>8} {b.params_compressed:>10} "
          f"{b.rounded_rate:>10}")

# %%
# Larger n shrinks the middle cores by n^2, the edge cores by n.
# n has to divide R and every trailing dim factor, hence dims (4, 8, 8) here.
for n in (1, 2, 4, 8):
    s = FactorizedShape((10, 10, 10), (4, 8, 8), 16, n)
    mode = Mode.TTD if n == 1 else Mode.STTD
    print(n, compression_report(s, mode).per_core_sizes)
