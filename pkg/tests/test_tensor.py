import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xlstm_fer import tensor as T
from xlstm_fer.tensor import Tensor

from conftest import autodiff_grads, fd_grads, rel_err


def u(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _apart(a, b):
    # keep operands away from ties, where the derivative jumps
    a = np.where(np.abs(a - b) < 1e-3, a + 1e-2, a)
    return [a, b]


# (name, op over Tensors, input sampler)
OPS = [
    ("add", lambda a, b: a + b, lambda r: [u(r, 3, 4), u(r, 4)]),
    ("sub", lambda a, b: a - b, lambda r: [u(r, 3, 1), u(r, 3, 4)]),
    ("mul", lambda a, b: a * b, lambda r: [u(r, 2, 3, 4), u(r, 3, 1)]),
    ("div", lambda a, b: a / b, lambda r: [u(r, 3, 4), u(r, 3, 4, lo=0.5, hi=1.5)]),
    ("scale", lambda a: T.scale(a, -2.5), lambda r: [u(r, 5)]),
    ("matmul", lambda a, b: a @ b, lambda r: [u(r, 2, 3, 4), u(r, 4, 5)]),
    ("matmul_batched", lambda a, b: a @ b, lambda r: [u(r, 2, 1, 3, 4), u(r, 3, 4, 2)]),
    ("exp", T.exp, lambda r: [u(r, 3, 4)]),
    ("log", T.log, lambda r: [u(r, 3, 4, lo=0.2, hi=2.0)]),
    ("sigmoid", T.sigmoid, lambda r: [u(r, 3, 4, lo=-4, hi=4)]),
    ("log_sigmoid", T.log_sigmoid, lambda r: [u(r, 3, 4, lo=-4, hi=4)]),
    ("tanh", T.tanh, lambda r: [u(r, 3, 4)]),
    ("abs", T.absolute, lambda r: [u(r, 3, 4)]),
    ("softmax", T.softmax, lambda r: [u(r, 3, 5)]),
    ("log_softmax", T.log_softmax, lambda r: [u(r, 3, 5)]),
    ("layer_norm", lambda x, w, b: T.layer_norm(x, w, b), lambda r: [u(r, 4, 6), u(r, 6), u(r, 6)]),
    ("group_norm", lambda x, w, b: T.group_norm(x, 3, w, b), lambda r: [u(r, 2, 3, 6), u(r, 6), u(r, 6)]),
    ("causal_conv1d", lambda x, k: T.causal_conv1d(x, k), lambda r: [u(r, 2, 5, 3), u(r, 3, 3)]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), lambda r: [u(r, 2, 3), u(r, 2, 2)]),
    ("slice", lambda a: a[1:, ::2], lambda r: [u(r, 3, 5)]),
    ("take", lambda a: T.take(a, [2, 0, 1, 0], axis=1), lambda r: [u(r, 2, 3)]),
    ("transpose", lambda a: T.transpose(a, (2, 0, 1)), lambda r: [u(r, 2, 3, 4)]),
    ("reshape", lambda a: a.reshape(6, 2), lambda r: [u(r, 3, 4)]),
    ("reduce_sum", lambda a: T.reduce_sum(a, axis=1, keepdims=True), lambda r: [u(r, 3, 4)]),
    ("reduce_max", lambda a: T.reduce_max(a, axis=-1), lambda r: [u(r, 3, 4)]),
    ("maximum", T.maximum, lambda r: _apart(u(r, 3, 4), u(r, 4))),
    ("clamp_min", lambda a: T.clamp_min(a, 0.1), lambda r: [u(r, 3, 4)]),
    ("where", lambda a: T.where(np.tril(np.ones((4, 4), bool)), a, 0.0), lambda r: [u(r, 2, 4, 4)]),
    ("cumsum", lambda a: T.cumsum(a, axis=-1), lambda r: [u(r, 3, 5)]),
]


@pytest.mark.parametrize("name,op,sample", OPS, ids=[o[0] for o in OPS])
def test_op_gradients_match_finite_differences(name, op, sample):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        arrays = sample(rng)
        with T.no_grad():
            out_shape = op(*[Tensor(a) for a in arrays]).shape
        w = rng.uniform(-1, 1, size=out_shape)

        def f(*arrs):
            with T.no_grad():
                return float(np.sum(op(*[Tensor(a) for a in arrs]).data * w))

        analytic = autodiff_grads(op, arrays, w)
        numeric = fd_grads(f, [a.copy() for a in arrays], eps=1e-6)
        worst = max(worst, *(rel_err(a, n) for a, n in zip(analytic, numeric)))
    assert worst < 1e-6, f"{name}: {worst:.2e}"


def test_matmul_identity():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match=r"add.*\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_causal_conv_reads_only_past(rng):
    x = u(rng, 1, 6, 2)
    k = u(rng, 3, 2)
    base = T.causal_conv1d(Tensor(x), Tensor(k)).data
    for s in range(6):
        xp = x.copy()
        xp[0, s] += 1.0
        diff = np.abs(T.causal_conv1d(Tensor(xp), Tensor(k)).data - base).sum(axis=-1)[0]
        assert np.all(diff[:s] == 0)
        assert np.all(diff[s:min(s + 3, 6)] > 0)
        assert np.all(diff[s + 3:] == 0)
    # t = 0 sees only x[0] times the last tap
    np.testing.assert_allclose(base[0, 0], k[2] * x[0, 0])


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.reduce_sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.reduce_sum(x * x)
    T.backward(loss)
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_backward_constant_loss_writes_nothing():
    x = Tensor([1.0, 2.0])
    c = T.reduce_sum(x * 3.0)
    T.backward(c)
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2.0)


def test_random_three_op_chain_matches_finite_differences(rng):
    for _ in range(20):
        a0, b0 = u(rng, 3, 4), u(rng, 4, 2)

        def build(a, b):
            return T.reduce_sum(T.tanh(a @ b) * T.sigmoid(a @ b))

        a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
        T.backward(build(a, b))
        numeric = fd_grads(lambda x, y: build(Tensor(x), Tensor(y)).item(), [a0.copy(), b0.copy()])
        assert rel_err(a.grad, numeric[0]) < 1e-6
        assert rel_err(b.grad, numeric[1]) < 1e-6


def test_shared_subexpression_gradient():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    T.backward(T.reduce_sum(y * y + y))
    np.testing.assert_allclose(x.grad, [4 * 27 + 6])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), np.float32), requires_grad=True)
    y = T.sigmoid(x * 2.0 + 1.0) @ Tensor(np.ones((3, 1), np.float32))
    assert y.dtype == np.float32
    T.backward(T.reduce_sum(y))
    assert x.grad.dtype == np.float32


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.data())
def test_row_major_index_round_trip(shape, data):
    idx = tuple(data.draw(st.integers(0, n - 1)) for n in shape)
    flat = np.ravel_multi_index(idx, shape)
    assert tuple(np.unravel_index(flat, shape)) == idx
    arr = np.arange(int(np.prod(shape))).reshape(shape)
    assert Tensor(arr).data.reshape(-1)[flat] == arr[idx]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_sums_to_one(seed):
    r = np.random.default_rng(seed)
    p = T.softmax(Tensor(r.uniform(-20, 20, size=(4, 7)))).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.all((p > 0) & (p < 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_norm_outputs_are_standardized(seed):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, size=(5, 12))
    ln = T.layer_norm(Tensor(x)).data
    np.testing.assert_allclose(ln.mean(-1), 0.0, atol=1e-6)
    v = x.var(-1)
    np.testing.assert_allclose(ln.var(-1), v / (v + 1e-5), rtol=1e-10)
    gn = T.group_norm(Tensor(x), 3).data.reshape(5, 3, 4)
    np.testing.assert_allclose(gn.mean(-1), 0.0, atol=1e-6)
    # the variance floor eps = 1e-5 makes the output variance v / (v + eps)
    v = x.reshape(5, 3, 4).var(-1)
    np.testing.assert_allclose(gn.var(-1), v / (v + 1e-5), rtol=1e-10)


def test_ops_stay_finite_on_finite_inputs(rng):
    x = Tensor(rng.uniform(-30, 30, size=(4, 5)))
    for out in (T.sigmoid(x), T.log_sigmoid(x), T.softmax(x), T.log_softmax(x), T.tanh(x),
                T.layer_norm(x), T.group_norm(x, 5)):
        assert np.all(np.isfinite(out.data))
