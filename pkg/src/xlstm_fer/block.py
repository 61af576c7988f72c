"""xLSTM residual block.

Wiring, for tokens ``x`` of shape ``(..., N, D)`` and a scan order::

    x'     = layer_norm(x)
    g, s   = split(x' @ W_up)                  # D -> 2 * D_inner
    c      = causal_conv(s)                    # in scan order, kernel 3
    u      = mLSTM(q, k from c; v from s)
    h_hat  = group_norm(u) + lambda * c
    h      = sigmoid(g) * h_hat                # h_hat un-permuted (and path-merged)
    out    = x + h @ W_down                    # D_inner -> D
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .mlstm import GateConfig, MLstmParams, forward_parallel, forward_recurrent, forward_chunkwise
from .module import Module, parameter, trunc_normal
from .paths import PathMerge, inverse_permutation
from .tensor import Tensor, as_tensor

MLSTM_FORMS = ("parallel", "recurrent", "chunkwise")


class ScanBranch(Module):
    """Conv + mLSTM + group norm + weighted skip: the part of the block that runs in scan order."""

    def __init__(self, inner_dim: int, heads: int, rng: np.random.Generator, dtype=np.float64,
                 kernel_size: int = 3, forget_bias: float = 1.0):
        if inner_dim % heads:
            raise ValueError(f"inner dim {inner_dim} is not divisible by {heads} heads")
        self.heads = heads
        bound = 1.0 / np.sqrt(kernel_size)
        self.conv_kernel = parameter(rng.uniform(-bound, bound, size=(kernel_size, inner_dim)), dtype)
        self.mlstm = MLstmParams(inner_dim, heads, inner_dim // heads, rng, dtype, forget_bias=forget_bias)
        self.gn_weight = parameter(np.ones(inner_dim), dtype)
        self.gn_bias = parameter(np.zeros(inner_dim), dtype)
        self.skip_weight = parameter(np.ones(1), dtype)

    def __call__(self, s: Tensor, gate_cfg: GateConfig, form: str = "parallel") -> Tensor:
        c = T.causal_conv1d(s, self.conv_kernel)
        if form == "parallel":
            u = forward_parallel(c, self.mlstm, gate_cfg, x_v=s)
        elif form == "recurrent":
            u = Tensor(forward_recurrent(c, self.mlstm, gate_cfg, x_v=s))
        elif form == "chunkwise":
            u = Tensor(forward_chunkwise(c, self.mlstm, gate_cfg, x_v=s))
        else:
            raise ValueError(f"unknown mLSTM form {form!r}; expected one of {MLSTM_FORMS}")
        return T.group_norm(u, self.heads, self.gn_weight, self.gn_bias) + c * self.skip_weight


class XLSTMBlock(Module):
    def __init__(self, dim: int, inner_dim: int, heads: int, rng: np.random.Generator,
                 dtype=np.float64, gate_cfg: GateConfig = GateConfig(), num_paths: int = 1,
                 share_paths: bool = True, kernel_size: int = 3, forget_bias: float = 1.0):
        self.dim = dim
        self.inner_dim = inner_dim
        self.gate_cfg = gate_cfg
        self.ln_weight = parameter(np.ones(dim), dtype)
        self.ln_bias = parameter(np.zeros(dim), dtype)
        self.up_proj = parameter(trunc_normal(rng, (dim, 2 * inner_dim)), dtype)
        n_branches = 1 if share_paths else num_paths
        self.branches = [ScanBranch(inner_dim, heads, rng, dtype, kernel_size, forget_bias)
                         for _ in range(n_branches)]
        self.merge = PathMerge(num_paths, dtype) if num_paths > 1 else None
        self.down_proj = parameter(trunc_normal(rng, (inner_dim, dim)), dtype)

    def __call__(self, tokens, orders: Sequence[np.ndarray], form: str = "parallel") -> Tensor:
        """Run the block once per scan order and merge; ``orders`` holds permutations of ``0..N-1``."""
        tokens = as_tensor(tokens)
        if tokens.ndim < 2 or tokens.shape[-1] != self.dim:
            raise ValueError(f"XLSTMBlock: tokens {tokens.shape} do not end in dim {self.dim}")
        n = tokens.shape[-2]
        expected = 1 if self.merge is None else len(self.merge.logits.data)
        if len(orders) != expected:
            raise ValueError(f"XLSTMBlock: got {len(orders)} scan orders, configured for {expected}")
        inverses = []
        for order in orders:
            if len(order) != n:
                raise ValueError(f"XLSTMBlock: scan order of length {len(order)} for {n} tokens")
            inverses.append(inverse_permutation(order))

        x = T.layer_norm(tokens, self.ln_weight, self.ln_bias)
        gate, signal = T.split(x @ self.up_proj, [self.inner_dim, self.inner_dim], axis=-1)
        outs = []
        for j, (order, inv) in enumerate(zip(orders, inverses)):
            branch = self.branches[j % len(self.branches)]
            identity = np.array_equal(order, np.arange(n))
            s = signal if identity else T.take(signal, order, axis=-2)
            h_hat = branch(s, self.gate_cfg, form)
            outs.append(h_hat if identity else T.take(h_hat, inv, axis=-2))
        merged = outs[0] if self.merge is None else self.merge(outs)
        h = T.sigmoid(gate) * merged
        return tokens + h @ self.down_proj


def block_forward(tokens, block: XLSTMBlock, order, form: str = "parallel") -> Tensor:
    """Single-order block pass: process ``tokens`` in ``order``, emit in original order."""
    return block(tokens, [np.asarray(order)], form)
