"""Straight-line numpy recomputations used as test oracles.

Everything here is written out token by token from the definitions, with no
shared code from the package, so agreement is evidence for both.
"""
import mpmath
import numpy as np


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def group_norm(x, groups, w, b, eps=1e-5):
    out = np.empty_like(x)
    size = x.shape[-1] // groups
    for g in range(groups):
        sl = slice(g * size, (g + 1) * size)
        z = x[..., sl]
        mu = z.mean(-1, keepdims=True)
        var = ((z - mu) ** 2).mean(-1, keepdims=True)
        out[..., sl] = (z - mu) / np.sqrt(var + eps)
    return out * w + b


def causal_conv(s, kernel):
    """``c[t] = sum_j kernel[j] * s[t - (K-1) + j]`` with zeros before the start."""
    n, _ = s.shape
    K = kernel.shape[0]
    c = np.zeros_like(s)
    for t in range(n):
        for j in range(K):
            src = t - (K - 1) + j
            if src >= 0:
                c[t] += kernel[j] * s[src]
    return c


def mlstm(x_qk, x_v, p, forget_variant="sigmoid"):
    """Literal unstabilized recurrence for one sequence ``(N, d_in)``; ``p`` maps names to arrays."""
    heads, _, d = p["W_q"].shape
    n = x_qk.shape[0]
    out = np.zeros((n, heads * d))
    for h in range(heads):
        C = np.zeros((d, d))
        nv = np.zeros(d)
        for t in range(n):
            q = x_qk[t] @ p["W_q"][h] + p["b_q"][h]
            k = x_qk[t] @ p["W_k"][h] / np.sqrt(d) + p["b_k"][h]
            v = x_v[t] @ p["W_v"][h] + p["b_v"][h]
            x = np.concatenate([q, k, v])
            i = np.exp(x @ p["w_i"][h] + p["b_i"][h])
            f_pre = x @ p["w_f"][h] + p["b_f"][h]
            f = np.exp(f_pre) if forget_variant == "exponential" else sigmoid(f_pre)
            o = sigmoid(x @ p["W_o"][h] + p["b_o"][h])
            C = f * C + i * np.outer(v, k)
            nv = f * nv + i * k
            out[t, h * d:(h + 1) * d] = o * (C @ q) / max(abs(nv @ q), 1.0)
    return out


def block(tokens, bp, heads, order, forget_variant="sigmoid"):
    """One block on ``(N, D)`` tokens for one scan order; ``bp`` maps names to arrays."""
    inner = bp["down_proj"].shape[0]
    x = tokens[order]
    xn = layer_norm(x, bp["ln_weight"], bp["ln_bias"])
    up = xn @ bp["up_proj"]
    g, s = up[:, :inner], up[:, inner:]
    c = causal_conv(s, bp["conv_kernel"])
    u = mlstm(c, s, bp["mlstm"], forget_variant)
    h_hat = group_norm(u, heads, bp["gn_weight"], bp["gn_bias"]) + bp["skip_weight"][0] * c
    h = sigmoid(g) * h_hat
    out = np.empty_like(tokens)
    out[order] = x + h @ bp["down_proj"]
    return out


def block_params(block_module, branch=0):
    """Pull a block's parameters out as plain arrays for :func:`block`."""
    br = block_module.branches[branch]
    return {
        "ln_weight": block_module.ln_weight.data, "ln_bias": block_module.ln_bias.data,
        "up_proj": block_module.up_proj.data, "down_proj": block_module.down_proj.data,
        "conv_kernel": br.conv_kernel.data, "gn_weight": br.gn_weight.data, "gn_bias": br.gn_bias.data,
        "skip_weight": br.skip_weight.data,
        "mlstm": {name: t.data for name, t in br.mlstm.named_parameters()},
    }


def mp_mlstm_head(q, k, v, i_pre, f_pre, o_pre, variant):
    """Literal unstabilized recurrence for one head in 60-digit arithmetic.

    Returns the outputs and, per step, whether every intermediate stayed inside
    the float64 range.
    """
    with mpmath.workdps(60):
        return _mp_run(q, k, v, i_pre, f_pre, o_pre, variant)


def _mp_run(q, k, v, i_pre, f_pre, o_pre, variant):
    n, d = q.shape
    big = mpmath.mpf(np.finfo(np.float64).max)
    C = mpmath.zeros(d, d)
    nv = mpmath.zeros(d, 1)
    out = np.empty((n, d))
    ok = np.empty(n, dtype=bool)
    in_range = True
    for t in range(n):
        i = mpmath.exp(mpmath.mpf(i_pre[t]))
        fp = mpmath.mpf(f_pre[t])
        f = mpmath.exp(fp) if variant == "exponential" else 1 / (1 + mpmath.exp(-fp))
        qt, kt, vt = (mpmath.matrix([mpmath.mpf(float(a)) for a in arr[t]]) for arr in (q, k, v))
        C = f * C + i * (vt * kt.T)
        nv = f * nv + i * kt
        num = C * qt
        den = max(abs((nv.T * qt)[0]), mpmath.mpf(1))
        vals = [abs(x) for x in list(C) + list(nv) + [i, f, den]]
        in_range = in_range and max(vals) < big
        ok[t] = in_range
        for j in range(d):
            o = 1 / (1 + mpmath.exp(-mpmath.mpf(o_pre[t, j])))
            out[t, j] = float(o * num[j] / den)
    return out, ok
