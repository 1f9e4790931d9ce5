import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kanrecon.ndtensor import tensor as F
from kanrecon.ndtensor.tensor import Tensor

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(fn, arrays, index, eps=1e-5):
    """Central differences of scalar ``fn(arrays)`` with respect to ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = fn(base)
        x[i] = old - eps
        fm = fn(base)
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def check_grad(build, arrays, eps=1e-5, seed=0, indices=None):
    """Largest relative error between backward() and central differences.

    ``build(tensors)`` returns an output tensor; it is reduced to a scalar
    with a fixed random weighting so every output coordinate contributes.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = build([Tensor(a) for a in arrays])
    weight = rng.standard_normal(probe.shape)

    def scalar(arrs):
        return float(np.sum(build([Tensor(a) for a in arrs]).data * weight))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = F.sum_(F.mul(build(leaves), Tensor(weight)))
    grads = F.backward(out)
    worst = 0.0
    for i in indices if indices is not None else range(len(arrays)):
        analytic = grads.get(leaves[i], np.zeros_like(arrays[i]))
        worst = max(worst, rel_err(analytic, numeric_grad(scalar, arrays, i, eps)))
    return worst


def model_grad_error(model, loss_fn, eps=1e-5, n_params=6, seed=0):
    """Compare backward() against central differences for a sample of parameters.

    ``loss_fn()`` rebuilds the scalar loss from the model's current weights.
    For each of ``n_params`` randomly chosen parameter tensors a handful of
    coordinates are probed. Returns the worst relative error.
    """
    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters()]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = F.backward(loss)
    chosen = rng.choice(len(params), size=min(n_params, len(params)), replace=False)
    analytic, numeric = [], []
    for j in chosen:
        p = params[j]
        g = grads.get(p, np.zeros_like(p.data))
        for _ in range(3):
            idx = tuple(int(rng.integers(0, s)) for s in p.shape)
            old = p.data[idx]
            p.data[idx] = old + eps
            fp = float(loss_fn().data)
            p.data[idx] = old - eps
            fm = float(loss_fn().data)
            p.data[idx] = old
            analytic.append(g[idx])
            numeric.append((fp - fm) / (2 * eps))
    return rel_err(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
