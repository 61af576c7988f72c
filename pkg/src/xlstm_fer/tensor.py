"""Dense tensor with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every op in this module records its
parents and a closure that maps the upstream gradient to one gradient per
parent. :func:`backward` walks the recorded graph in reverse topological
order and accumulates ``dLoss/dLeaf`` into ``leaf.grad``.

The op set is closed: only what the patch embedding, mLSTM, xLSTM block,
path merge and classifier need.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = as_tensor(a, like=b)
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(op, a, b)
    return a, b


# -- elementwise binary --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max of two tensors; ties split the gradient evenly."""
    a, b = _pair("maximum", a, b)
    out = np.maximum(a.data, b.data)

    def bw(g):
        wa = ((a.data > b.data) + 0.5 * (a.data == b.data)).astype(out.dtype)
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * (1.0 - wa), b.shape)

    return _make(out, (a, b), bw)


def clamp_min(x: Tensor, c: float) -> Tensor:
    """Elementwise ``max(x, c)`` against a constant."""
    out = np.maximum(x.data, c)
    return _make(out, (x,), lambda g: (g * (x.data >= c),))


def where(cond: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """``x`` where ``cond`` holds, constant ``fill`` elsewhere."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, x.data, np.asarray(fill, dtype=x.dtype))
    return _make(out, (x,), lambda g: (_unbroadcast(np.where(cond, g, 0.0), x.shape),))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),))


# -- elementwise unary ---------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    # log σ(z) = min(z, 0) - log1p(exp(-|z|)), finite for all finite z
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _make(out.astype(z.dtype, copy=False), (x,), lambda g: (g * _sigmoid(-z),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def absolute(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


# -- linear algebra / shape ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic and advanced indexing (slices, ints, index arrays)."""
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out, copy=True), (x,), bw)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; with a permutation this is the scan reorder."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if indices.ndim != 1 or (indices.size and (indices.min() < -x.shape[axis] or indices.max() >= x.shape[axis])):
        raise ValueError(f"take: indices out of range for axis {axis} of shape {x.shape}")
    out = np.take(x.data, indices, axis=axis)
    unique = np.unique(indices % max(x.shape[axis], 1)).size == indices.size

    def bw(g):
        gx = np.zeros_like(x.data)
        idx = [slice(None)] * x.ndim
        idx[axis] = indices
        if unique:
            gx[tuple(idx)] = g
        else:
            np.add.at(gx, tuple(idx), g)
        return (gx,)

    return _make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no tensors given")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ValueError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(out, tensors, bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split: sizes {tuple(sizes)} do not sum to {x.shape[axis]} (shape {x.shape})")
    parts, start = [], 0
    ax = axis % x.ndim
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + s)
        parts.append(getitem(x, tuple(idx)))
        start += s
    return parts


# -- reductions ----------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (x,),
                 lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis, keepdims), 1.0 / count)


def reduce_max(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient is shared evenly among tied maxima."""
    out = np.max(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        full = _expand_reduced(out, x.shape, axis, keepdims)
        mask = (x.data == full).astype(x.dtype)
        count = np.sum(mask, axis=axis, keepdims=True)
        return (mask / count * _expand_reduced(g, x.shape, axis, keepdims),)

    return _make(np.asarray(out), (x,), bw)


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    out = np.cumsum(x.data, axis=axis)
    return _make(out, (x,), lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


# -- composite layers with fused backward ------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)

    return _make(out, (x,), bw)


def _normalize(z: np.ndarray, eps: float):
    mu = z.mean(axis=-1, keepdims=True)
    zc = z - mu
    var = (zc * zc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return zc * rstd, rstd


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    return rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine scale/shift."""
    c = x.shape[-1]
    for p, label in ((weight, "weight"), (bias, "bias")):
        if p is not None and p.shape != (c,):
            raise ValueError(f"layer_norm: {label} shape {p.shape} does not match features {c}")
    xhat, rstd = _normalize(x.data, eps)
    w = weight.data if weight is not None else None
    out = xhat * w if w is not None else xhat
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def bw(g):
        gxhat = g * w if w is not None else g
        grads = [_normalize_backward(gxhat, xhat, rstd)]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), parents, bw)


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Per-token group normalization over contiguous channel groups of the last axis."""
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    for p, label in ((weight, "weight"), (bias, "bias")):
        if p is not None and p.shape != (c,):
            raise ValueError(f"group_norm: {label} shape {p.shape} does not match channels {c}")
    lead = x.shape[:-1]
    z = x.data.reshape(*lead, groups, c // groups)
    xhat_g, rstd = _normalize(z, eps)
    xhat = xhat_g.reshape(x.shape)
    w = weight.data if weight is not None else None
    out = xhat * w if w is not None else xhat
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def bw(g):
        gxhat = (g * w if w is not None else g).reshape(z.shape)
        grads = [_normalize_backward(gxhat, xhat_g, rstd).reshape(x.shape)]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), parents, bw)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution along the sequence axis.

    ``x`` is ``(..., N, C)`` and ``kernel`` is ``(K, C)``. The output at
    position ``t`` is ``sum_j kernel[j] * x[t - (K-1) + j]`` with zeros left of
    the sequence start, so it reads only positions ``t-K+1 .. t``.
    """
    if kernel.ndim != 2 or x.ndim < 2 or kernel.shape[1] != x.shape[-1]:
        raise ValueError(f"causal_conv1d: input {x.shape} and kernel {kernel.shape} do not conform")
    k = kernel.shape[0]
    n = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += kernel.data[j] * xp[..., j:j + n, :]
    if bias is not None:
        out = out + bias.data
    parents = [x, kernel] + ([bias] if bias is not None else [])

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for j in range(k):
            gxp[..., j:j + n, :] += kernel.data[j] * g
            gk[j] = np.sum(g * xp[..., j:j + n, :], axis=tuple(range(g.ndim - 1)))
        grads = [gxp[..., k - 1:, :], gk]
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make(out, parents, bw)


# -- driver --------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``dLoss/dLeaf`` into ``.grad`` of every reachable tracked leaf."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
