"""Matrix-memory LSTM (mLSTM) layer.

Projections::

    q = W_q x_qk + b_q
    k = W_k x_qk / sqrt(d_head) + b_k
    v = W_v x_v + b_v

Per head and timestep, the gate input is ``concat(q, k, v)``; the input and
forget gates are scalars and the output gate is a ``d_head`` vector::

    i = exp(w_i . x + b_i)
    f = exp(w_f . x + b_f)  or  sigmoid(w_f . x + b_f)
    o = sigmoid(W_o x + b_o)

    C_t = f C_{t-1} + i v k^T
    n_t = f n_{t-1} + i k
    h_t = o * C_t q / max(|n_t . q|, 1)

Three evaluation forms are provided and agree to rounding:

* :func:`recurrent_core` steps the recurrence left to right (numpy, no graph),
  O(N) time and O(1) state.
* :func:`parallel_core` materializes the causal N x N decay matrix with
  :class:`~xlstm_fer.tensor.Tensor` ops, so it is differentiable; this is the
  training path.
* :func:`chunkwise_core` tiles the sequence, parallel within a chunk and
  recurrent across chunks.

Exponential gates overflow quickly, so the stabilized forms track a running
log-scale ``m`` and store ``C * exp(-m)``, ``n * exp(-m)``. The normalizer
floor becomes ``exp(-m)``, which leaves ``h`` unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .module import Module, parameter, trunc_normal
from .tensor import Tensor, as_tensor

FORGET_VARIANTS = ("exponential", "sigmoid")


@dataclass(frozen=True)
class GateConfig:
    forget_variant: str = "sigmoid"
    stabilized: bool = True

    def __post_init__(self):
        if self.forget_variant not in FORGET_VARIANTS:
            raise ValueError(f"forget_variant must be one of {FORGET_VARIANTS}, got {self.forget_variant!r}")


@dataclass
class MLstmState:
    """Recurrent carry: ``C`` is ``(..., H, d, d)``, ``n`` is ``(..., H, d)``, ``m`` is ``(..., H)``.

    ``steps`` counts consumed tokens. While it is zero the memory is empty and
    the first stabilizer value is taken from the input gate alone.
    """
    C: np.ndarray
    n: np.ndarray
    m: np.ndarray
    steps: int = 0

    @classmethod
    def zeros(cls, heads: int, d_head: int, batch_shape=(), dtype=np.float64) -> "MLstmState":
        return cls(
            C=np.zeros((*batch_shape, heads, d_head, d_head), dtype=dtype),
            n=np.zeros((*batch_shape, heads, d_head), dtype=dtype),
            m=np.zeros((*batch_shape, heads), dtype=dtype),
        )


class MLstmParams(Module):
    """Per-head projection and gate weights.

    ``W_q``, ``W_k``, ``W_v`` are ``(H, d_in, d_head)``; gate weights ``w_i``, ``w_f``
    are ``(H, 3*d_head)`` over ``concat(q, k, v)``; ``W_o`` is ``(H, 3*d_head, d_head)``.
    """

    def __init__(self, d_in: int, heads: int, d_head: int, rng: np.random.Generator,
                 dtype=np.float64, forget_bias: float = 1.0, std: float = 0.02):
        self.heads = heads
        self.d_head = d_head
        self.d_in = d_in
        g = 3 * d_head
        self.W_q = parameter(trunc_normal(rng, (heads, d_in, d_head), std), dtype)
        self.W_k = parameter(trunc_normal(rng, (heads, d_in, d_head), std), dtype)
        self.W_v = parameter(trunc_normal(rng, (heads, d_in, d_head), std), dtype)
        self.b_q = parameter(np.zeros((heads, d_head)), dtype)
        self.b_k = parameter(np.zeros((heads, d_head)), dtype)
        self.b_v = parameter(np.zeros((heads, d_head)), dtype)
        self.w_i = parameter(trunc_normal(rng, (heads, g), std), dtype)
        self.w_f = parameter(trunc_normal(rng, (heads, g), std), dtype)
        self.b_i = parameter(np.zeros(heads), dtype)
        self.b_f = parameter(np.full(heads, forget_bias), dtype)
        self.W_o = parameter(trunc_normal(rng, (heads, g, d_head), std), dtype)
        self.b_o = parameter(np.zeros((heads, d_head)), dtype)

    @property
    def inner_dim(self) -> int:
        return self.heads * self.d_head


# -- projections and gate pre-activations --------------------------------------

def project_qkv(x_qk, x_v, params: MLstmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Map ``(..., N, d_in)`` inputs to per-head ``(..., H, N, d_head)`` q, k, v."""
    x_qk, x_v = as_tensor(x_qk), as_tensor(x_v)
    for label, x in (("x_qk", x_qk), ("x_v", x_v)):
        if x.ndim < 2 or x.shape[-1] != params.d_in:
            raise ValueError(f"project_qkv: {label} shape {x.shape} does not end in d_in={params.d_in}")
    if x_qk.shape != x_v.shape:
        raise ValueError(f"project_qkv: x_qk {x_qk.shape} and x_v {x_v.shape} differ")
    xq = x_qk.reshape(*x_qk.shape[:-2], 1, *x_qk.shape[-2:])
    xv = x_v.reshape(*x_v.shape[:-2], 1, *x_v.shape[-2:])
    h, d = params.heads, params.d_head
    q = xq @ params.W_q + params.b_q.reshape(h, 1, d)
    k = T.scale(xq @ params.W_k, 1.0 / math.sqrt(d)) + params.b_k.reshape(h, 1, d)
    v = xv @ params.W_v + params.b_v.reshape(h, 1, d)
    return q, k, v


def gate_preactivations(q: Tensor, k: Tensor, v: Tensor, params: MLstmParams):
    """Return ``(i_pre, f_pre, o_pre)`` with shapes ``(..., H, N)``, ``(..., H, N)``, ``(..., H, N, d)``."""
    h, g = params.heads, 3 * params.d_head
    x = T.concat([q, k, v], axis=-1)
    i_pre = (x @ params.w_i.reshape(h, g, 1)).reshape(*x.shape[:-1]) + params.b_i.reshape(h, 1)
    f_pre = (x @ params.w_f.reshape(h, g, 1)).reshape(*x.shape[:-1]) + params.b_f.reshape(h, 1)
    o_pre = x @ params.W_o + params.b_o.reshape(h, 1, params.d_head)
    return i_pre, f_pre, o_pre


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_sigmoid(z))


def log_forget(f_pre: np.ndarray, variant: str) -> np.ndarray:
    return np.asarray(f_pre) if variant == "exponential" else _log_sigmoid(np.asarray(f_pre))


def gate_update(i_pre, f_pre, cfg: GateConfig, m_prev, first: bool = False):
    """Scalar gates for one step from pre-activations.

    Returns ``(i, f, m)``. Unstabilized: the raw ``exp``/``sigmoid`` gates and
    ``m = 0``. Stabilized: ``m = max(log f + m_prev, i_pre)`` (just ``i_pre`` on
    the first step) and the rescaled gates ``exp(i_pre - m)``,
    ``exp(log f + (m_prev - m))``.
    """
    i_pre = np.asarray(i_pre)
    logf = log_forget(f_pre, cfg.forget_variant)
    if not cfg.stabilized:
        return np.exp(i_pre), np.exp(logf), np.zeros_like(i_pre)
    if first:
        m = i_pre.copy()
        return np.ones_like(i_pre), np.zeros_like(i_pre), m
    m = np.maximum(logf + m_prev, i_pre)
    # m_prev - m is exact or nearly so; (logf + m_prev) - m would round at the scale of |m|
    return np.exp(i_pre - m), np.exp(logf + (m_prev - m)), m


def compute_gates(x_gate, params: MLstmParams, cfg: GateConfig, m_prev, first: bool = False):
    """Gates for one timestep from the per-head gate input ``(..., H, 3*d_head)``.

    Returns ``(i, f, o_pre, m)``.
    """
    x = np.asarray(x_gate.data if isinstance(x_gate, Tensor) else x_gate)
    if x.shape[-2:] != (params.heads, 3 * params.d_head):
        raise ValueError(f"compute_gates: gate input {x.shape} does not end in "
                         f"({params.heads}, {3 * params.d_head})")
    i_pre = np.einsum("...hg,hg->...h", x, params.w_i.data) + params.b_i.data
    f_pre = np.einsum("...hg,hg->...h", x, params.w_f.data) + params.b_f.data
    o_pre = np.einsum("...hg,hgd->...hd", x, params.W_o.data) + params.b_o.data
    i, f, m = gate_update(i_pre, f_pre, cfg, m_prev, first)
    return i, f, o_pre, m


def step(state: MLstmState, q, k, v, gates, o_pre) -> tuple[MLstmState, np.ndarray]:
    """One recurrence step. ``q``, ``k``, ``v``, ``o_pre`` are ``(..., H, d)``; ``gates`` is ``(i, f, m)``."""
    i, f, m = gates
    if q.shape != state.n.shape or k.shape != q.shape or v.shape != q.shape:
        raise ValueError(f"step: q/k/v shapes {q.shape}, {k.shape}, {v.shape} do not match state {state.n.shape}")
    fi, ii = f[..., None], i[..., None]
    C = fi[..., None] * state.C + ii[..., None] * (v[..., :, None] * k[..., None, :])
    n = fi * state.n + ii * k
    num = np.einsum("...ij,...j->...i", C, q)
    denom = np.maximum(np.abs(np.sum(n * q, axis=-1)), np.exp(-m))
    h = _sigmoid(o_pre) * num / denom[..., None]
    return MLstmState(C, n, m, state.steps + 1), h


# -- the three forms over precomputed q, k, v and pre-activations ---------------

def recurrent_core(q, k, v, i_pre, f_pre, o_pre, cfg: GateConfig, state: MLstmState | None = None,
                   return_state: bool = False):
    """Left-to-right recurrence. Inputs are ``(..., H, N, d)`` / ``(..., H, N)`` arrays."""
    q, k, v, i_pre, f_pre, o_pre = (np.asarray(a.data if isinstance(a, Tensor) else a)
                                    for a in (q, k, v, i_pre, f_pre, o_pre))
    *lead, heads, n_tok, d = q.shape
    if n_tok < 1:
        raise ValueError("recurrent_core: empty sequence")
    if state is None:
        state = MLstmState.zeros(heads, d, tuple(lead), dtype=q.dtype)
    out = np.empty_like(q)
    for t in range(n_tok):
        gates = gate_update(i_pre[..., t], f_pre[..., t], cfg, state.m, first=state.steps == 0)
        state, out[..., t, :] = step(state, q[..., t, :], k[..., t, :], v[..., t, :],
                                     gates, o_pre[..., t, :])
    return (out, state) if return_state else out


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def running_stabilizer(i_pre: np.ndarray, logf: np.ndarray) -> np.ndarray:
    """``m_1 = i_1``, ``m_t = max(log f_t + m_{t-1}, i_t)``: the row max of the log decay matrix."""
    F = np.cumsum(logf, axis=-1)
    return F + np.maximum.accumulate(i_pre - F, axis=-1)


def parallel_core(q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, f_pre: Tensor, o_pre: Tensor,
                  cfg: GateConfig) -> Tensor:
    """Closed form over all positions at once; differentiable.

    ``logD[t, s] = sum_{j in (s, t]} log f_j + i_pre[s]`` for ``s <= t``. With
    stabilization row ``t`` is shifted by the running stabilizer ``m_t`` (held
    constant for differentiation, the result does not depend on it). The
    shifted value is assembled from the same stabilized log gates the
    recurrence uses, ``i_pre[s] - m_s`` and ``log f_j + m_{j-1} - m_j``, which
    are all non-positive, so large ``|logD|`` never enters an exponent.
    """
    q, k, v, i_pre, f_pre, o_pre = (as_tensor(a) for a in (q, k, v, i_pre, f_pre, o_pre))
    n_tok = q.shape[-2]
    if n_tok < 1:
        raise ValueError("parallel_core: empty sequence")
    logf = T.log_sigmoid(f_pre) if cfg.forget_variant == "sigmoid" else f_pre
    lead = logf.shape
    if cfg.stabilized:
        m_np = running_stabilizer(i_pre.data.astype(np.float64), logf.data.astype(np.float64))
        m_prev = np.concatenate([m_np[..., :1], m_np[..., :-1]], axis=-1)
        m = Tensor(m_np, dtype=q.dtype)
        g = logf + Tensor(m_prev - m_np, dtype=q.dtype)
        a = i_pre - m
        floor = Tensor(np.exp(-m_np), dtype=q.dtype)
    else:
        g, a = logf, i_pre
        floor = Tensor(np.ones(lead, dtype=q.dtype))
    mask = _causal_mask(n_tok)
    strict = np.tril(np.ones((n_tok, n_tok), dtype=bool), -1)
    # segment sums over (s, t] accumulated down the rows
    seg = T.cumsum(T.where(strict, g.reshape(*lead, 1), 0.0), axis=-2)
    log_d = T.where(mask, seg + a.reshape(*lead[:-1], 1, n_tok), 0.0)
    decay = T.where(mask, T.exp(log_d), 0.0)
    scores = (q @ T.swapaxes(k, -1, -2)) * decay
    denom = T.maximum(T.absolute(T.reduce_sum(scores, axis=-1)), floor)
    h_tilde = (scores @ v) / denom.reshape(*lead, 1)
    return T.sigmoid(o_pre) * h_tilde


def chunkwise_core(q, k, v, i_pre, f_pre, o_pre, cfg: GateConfig, chunk: int = 64) -> np.ndarray:
    """Chunked evaluation (numpy, no graph): quadratic inside a chunk, recurrent across chunks."""
    q, k, v, i_pre, f_pre, o_pre = (np.asarray(a.data if isinstance(a, Tensor) else a)
                                    for a in (q, k, v, i_pre, f_pre, o_pre))
    *lead, heads, n_tok, d = q.shape
    if n_tok < 1:
        raise ValueError("chunkwise_core: empty sequence")
    if chunk < 1:
        raise ValueError(f"chunkwise_core: chunk must be positive, got {chunk}")
    logf_all = log_forget(f_pre, cfg.forget_variant)
    C = np.zeros((*lead, heads, d, d), dtype=q.dtype)
    nv = np.zeros((*lead, heads, d), dtype=q.dtype)
    m_prev = np.full((*lead, heads), -np.inf)
    out = np.empty_like(q)
    for start in range(0, n_tok, chunk):
        sl = slice(start, min(start + chunk, n_tok))
        qc, kc, vc = q[..., sl, :], k[..., sl, :], v[..., sl, :]
        L = qc.shape[-2]
        F = np.cumsum(logf_all[..., sl], axis=-1)
        mask = _causal_mask(L)
        log_d = np.where(mask, F[..., :, None] - F[..., None, :] + i_pre[..., sl][..., None, :], -np.inf)
        carry = F + m_prev[..., None]
        if cfg.stabilized:
            m = np.maximum(np.max(log_d, axis=-1), carry)
        else:
            m = np.zeros_like(F)
        decay = np.exp(log_d - m[..., None])
        w_carry = np.exp(carry - m)
        scores = np.einsum("...td,...sd->...ts", qc, kc) * decay
        num = scores @ vc + w_carry[..., None] * np.einsum("...ij,...tj->...ti", C, qc)
        dot = scores.sum(-1) + w_carry * np.einsum("...j,...tj->...t", nv, qc)
        floor = np.exp(-m) if cfg.stabilized else np.ones_like(m)
        out[..., sl, :] = _sigmoid(o_pre[..., sl, :]) * num / np.maximum(np.abs(dot), floor)[..., None]
        # carry state to the chunk end
        end_d = F[..., -1:] - F + i_pre[..., sl]
        end_carry = F[..., -1] + m_prev
        m_new = np.maximum(np.max(end_d, axis=-1), end_carry) if cfg.stabilized else np.zeros_like(end_carry)
        w_s = np.exp(end_d - m_new[..., None])
        w_c = np.exp(end_carry - m_new)
        C = w_c[..., None, None] * C + np.einsum("...s,...si,...sj->...ij", w_s, vc, kc)
        nv = w_c[..., None] * nv + np.einsum("...s,...sj->...j", w_s, kc)
        m_prev = m_new
    return out


# -- full layer -------------------------------------------------------------------

def merge_heads(h) -> Tensor | np.ndarray:
    """``(..., H, N, d)`` to ``(..., N, H*d)``."""
    if isinstance(h, Tensor):
        hs = T.swapaxes(h, -2, -3)
        return hs.reshape(*hs.shape[:-2], hs.shape[-2] * hs.shape[-1])
    hs = np.swapaxes(h, -2, -3)
    return hs.reshape(*hs.shape[:-2], hs.shape[-2] * hs.shape[-1])


def _prepare(seq, params: MLstmParams, x_v=None):
    seq = as_tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] < 1:
        raise ValueError(f"mLSTM: expected a non-empty (..., N, d_in) sequence, got shape {seq.shape}")
    q, k, v = project_qkv(seq, seq if x_v is None else x_v, params)
    return (q, k, v) + gate_preactivations(q, k, v, params)


def forward_recurrent(seq, params: MLstmParams, cfg: GateConfig, x_v=None) -> np.ndarray:
    """Recurrent evaluation; returns an array ``(..., N, H*d_head)`` (no graph)."""
    with T.no_grad():
        parts = _prepare(seq, params, x_v)
    return merge_heads(recurrent_core(*parts, cfg))


def forward_parallel(seq, params: MLstmParams, cfg: GateConfig, x_v=None) -> Tensor:
    """Parallel evaluation; returns a differentiable ``(..., N, H*d_head)`` tensor."""
    return merge_heads(parallel_core(*_prepare(seq, params, x_v), cfg))


def forward_chunkwise(seq, params: MLstmParams, cfg: GateConfig, x_v=None, chunk: int = 64) -> np.ndarray:
    with T.no_grad():
        parts = _prepare(seq, params, x_v)
    return merge_heads(chunkwise_core(*parts, cfg, chunk=chunk))
