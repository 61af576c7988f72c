import numpy as np
import pytest

from xlstm_fer import tensor as T
from xlstm_fer.gradcheck import grad_check, relative_error
from xlstm_fer.tensor import Tensor


def test_quadratic_closure_is_exact(rng):
    a = Tensor(rng.standard_normal((4, 4)))
    x = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)

    def closure():
        y = T.matmul(b, T.matmul(a, x))
        return T.reduce_sum(y * y) + T.reduce_sum(x * x)

    report = grad_check(closure, {"x": x, "b": b}, eps=1e-5)
    assert report.deterministic
    assert report.max_rel_error < 1e-8
    assert [e.name for e in report.entries] == ["x", "b"]
    assert report.entries[1].checked == 12


def test_eps_zero_rejected():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="eps"):
        grad_check(lambda: T.reduce_sum(x * x), {"x": x}, eps=0.0)


def test_non_deterministic_closure_fails_the_check():
    x = Tensor([1.0, 2.0], requires_grad=True)
    r = np.random.default_rng(0)

    def closure():
        return T.reduce_sum(x * x) + float(r.uniform())

    report = grad_check(closure, {"x": x})
    assert not report.deterministic
    assert not report.passed(1e-4)
    assert "not deterministic" in report.format()


def test_wrong_gradient_is_caught():
    x = Tensor([0.5, -1.0], requires_grad=True)

    def closure():
        # sigmoid with a deliberately wrong backward
        y = T._make(1 / (1 + np.exp(-x.data)), (x,), lambda g: (g,))
        return T.reduce_sum(y)

    assert not grad_check(closure, {"x": x}).passed(1e-4)


def test_subsampled_coordinates(rng):
    w = Tensor(rng.standard_normal((10, 10)), requires_grad=True)
    report = grad_check(lambda: T.reduce_sum(T.tanh(w)), {"w": w}, max_entries=5)
    assert report.entries[0].checked == 5
    assert report.passed(1e-6)


def test_relative_error_scale_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
