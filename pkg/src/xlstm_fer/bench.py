"""Timing of the recurrent, parallel and chunkwise mLSTM forms over sequence length."""
from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .mlstm import GateConfig, MLstmParams, chunkwise_core, gate_preactivations, parallel_core, \
    project_qkv, recurrent_core

DEFAULT_LENGTHS = (49, 196, 784)
FIELDS = ("form", "tokens", "seconds", "peak_bytes", "max_abs_dev")


@dataclass
class BenchRow:
    form: str
    tokens: int
    seconds: float
    peak_bytes: int
    max_abs_dev: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in FIELDS}


def bench_inputs(n: int, d_in: int = 64, heads: int = 4, seed: int = 0, forget_variant: str = "sigmoid"):
    """Projected q, k, v and gate pre-activations for one random float64 sequence."""
    rng = np.random.default_rng(seed)
    params = MLstmParams(d_in, heads, d_in // heads, rng, np.float64, std=0.2)
    x = rng.standard_normal((1, n, d_in))
    with T.no_grad():
        q, k, v = project_qkv(x, x, params)
        parts = (q, k, v) + gate_preactivations(q, k, v, params)
    return tuple(p.data for p in parts), GateConfig(forget_variant, True)


def time_form(fn, reps: int) -> tuple[float, int, np.ndarray]:
    """Mean wall time over ``reps`` calls (after one warm-up) and the peak traced allocation."""
    out = fn()
    tracemalloc.start()
    fn()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    start = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - start) / reps, peak, out


def run_bench(lengths=DEFAULT_LENGTHS, reps: int = 10, d_in: int = 64, heads: int = 4,
              chunk: int = 64, forms=("recurrent", "parallel", "chunkwise")) -> list[BenchRow]:
    """One row per (form, length); ``max_abs_dev`` is measured against the recurrent form."""
    rows = []
    for n in lengths:
        arrays, cfg = bench_inputs(n, d_in, heads)
        fns = {
            "recurrent": lambda: recurrent_core(*arrays, cfg),
            "parallel": lambda: _parallel(arrays, cfg),
            "chunkwise": lambda: chunkwise_core(*arrays, cfg, chunk=chunk),
        }
        reference = None
        for form in forms:
            seconds, peak, out = time_form(fns[form], reps)
            if reference is None:
                reference = recurrent_core(*arrays, cfg) if form != "recurrent" else out
            rows.append(BenchRow(form, n, seconds, peak, float(np.max(np.abs(out - reference)))))
    return rows


def _parallel(arrays, cfg):
    with T.no_grad():
        return parallel_core(*arrays, cfg).data


def growth_ratios(rows: list[BenchRow], form: str = "recurrent") -> list[tuple[int, int, float]]:
    """``(n, 2n, t(2n)/t(n))`` for every consecutive doubling present in ``rows``."""
    t = {r.tokens: r.seconds for r in rows if r.form == form}
    return [(n, 2 * n, t[2 * n] / t[n]) for n in sorted(t) if 2 * n in t]


def write_csv(rows: list[BenchRow], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_dict())
    return path
