"""
One mLSTM layer, three ways to run it
=====================================

The matrix-memory recurrence can be evaluated step by step (recurrent),
as one masked attention-like product (parallel), or in chunks that carry
the state between blocks (chunkwise). All three agree to rounding.
"""
import time

import numpy as np

from xlstm_fer.mlstm import (GateConfig, MLstmParams, forward_chunkwise, forward_parallel,
                             forward_recurrent, recurrent_core)

rng = np.random.default_rng(0)
params = MLstmParams(d_in=16, heads=4, d_head=8, rng=rng)
x = rng.standard_normal((49, 16))

for variant in ("sigmoid", "exponential"):
    cfg = GateConfig(variant)
    rec = forward_recurrent(x, params, cfg)
    par = forward_parallel(x, params, cfg).data
    chk = forward_chunkwise(x, params, cfg, chunk=16)
    print(f"{variant:<12} parallel dev {np.max(np.abs(par - rec)):.1e}  "
          f"chunkwise dev {np.max(np.abs(chk - rec)):.1e}")

# %%
# Stabilization. With large positive preactivations the exponential gates
# compound, and the literal recurrence overflows float64 after a few dozen
# steps; the running max m keeps every exponent <= 0.
n = 64
q, k, v = (rng.standard_normal((1, n, 4)) for _ in range(3))
i_pre, f_pre = rng.uniform(0, 50, size=(2, 1, n))
o_pre = rng.standard_normal((1, n, 4))
with np.errstate(over="ignore", invalid="ignore"):
    raw = recurrent_core(q, k, v, i_pre, f_pre, o_pre, GateConfig("exponential", stabilized=False))
stab = recurrent_core(q, k, v, i_pre, f_pre, o_pre, GateConfig("exponential", stabilized=True))
print("unstabilized finite steps:", int(np.isfinite(raw).all(-1).sum()), "of", n)
print("stabilized finite steps:  ", int(np.isfinite(stab).all(-1).sum()), "of", n)

# %%
# Cost. The recurrent loop is linear in N, the parallel form quadratic.
for n in (49, 98, 196, 392):
    xs = rng.standard_normal((n, 16))
    t0 = time.perf_counter()
    forward_recurrent(xs, params, GateConfig("sigmoid"))
    t1 = time.perf_counter()
    forward_parallel(xs, params, GateConfig("sigmoid"))
    t2 = time.perf_counter()
    print(f"N={n:4d}  recurrent {t1 - t0:.4f}s  parallel {t2 - t1:.4f}s")
