"""
Reverse-mode autodiff on numpy arrays
=====================================

Every op records its parents and a backward closure. ``backward`` walks the
tape in reverse topological order and accumulates ``.grad`` on leaves.
"""
import numpy as np

from xlstm_fer import tensor as T
from xlstm_fer.gradcheck import grad_check
from xlstm_fer.tensor import Tensor

rng = np.random.default_rng(0)

# a two-layer network on a batch of 5 rows
x = Tensor(rng.standard_normal((5, 4)))
w1 = Tensor(rng.standard_normal((4, 8)) * 0.5, requires_grad=True)
w2 = Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True)


def loss_fn():
    h = T.tanh(x @ w1)
    return T.mean(T.reduce_sum(-T.log_softmax(h @ w2)[:, :1], axis=-1))


loss = loss_fn()
T.backward(loss)
print("loss", loss.item())
print("dL/dw2 row norms", np.linalg.norm(w2.grad, axis=1).round(4))

# central differences agree with the tape to about 1e-9 relative
report = grad_check(loss_fn, {"w1": w1, "w2": w2}, eps=1e-5)
print(report.format())

# broadcasting is undone on the way back: a bias of shape (3,) gets a (3,) gradient
b = Tensor(np.zeros(3), requires_grad=True)
T.backward(T.reduce_sum(T.sigmoid(Tensor(np.ones((5, 3))) + b)))
print("bias grad", b.grad)

# shape errors name the op and both shapes
try:
    T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
except ValueError as exc:
    print("error:", exc)
