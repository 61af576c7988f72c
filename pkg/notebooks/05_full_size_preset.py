"""
The full-size configuration
===========================

224x224 RGB input, 16x16 patches (196 tokens), width 384, 26 blocks and 192
heads. Built untrained; one forward pass yields a 7-way distribution, uniform
while the classifier is still zero.
"""
import time

import numpy as np

from xlstm_fer.model import XLSTMFER, preset

cfg = preset("paper-xlstm-fer")
model = XLSTMFER(cfg)
n_params = sum(p.data.size for p in model.parameters())
print(f"{cfg.num_tokens} tokens, {cfg.depth} blocks, {n_params / 1e6:.2f}M parameters")

image = np.random.default_rng(0).uniform(0, 1, size=(224, 224, 3))
for form in ("recurrent", "parallel"):
    t0 = time.perf_counter()
    probs = model.predict_proba(image, form=form)[0]
    print(f"{form:<10} {time.perf_counter() - t0:.1f}s  probs {probs.round(4)}  sum {probs.sum():.6f}")
