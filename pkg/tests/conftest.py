import numpy as np
import pytest

from xlstm_fer import tensor as T


def fd_grads(fn, arrays, eps=1e-5):
    """Central differences of scalar ``fn(*arrays)`` (numpy in, float out) w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + eps
            fp = fn(*arrays)
            a[idx] = orig - eps
            fm = fn(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def autodiff_grads(op, arrays, weights):
    """Gradients of ``sum(op(*tensors) * weights)`` via the tape."""
    ts = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    T.backward(T.reduce_sum(out * T.Tensor(weights)))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_err(a, n):
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ---------------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """``acceptance(name, passed, detail)`` records one report line and returns ``passed``."""
    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
