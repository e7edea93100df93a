import numpy as np
import pytest

from peftlab.tensor import Tensor


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at ndarray ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        hi = f(x)
        x[i] = old - h
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grads(build, arrays, h=1e-5):
    """Compare autodiff gradients of ``build(*tensors)`` with finite differences.

    Returns the worst relative error across inputs.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(v) if j == k else Tensor(arrays[j]) for j in range(len(arrays))]
            return build(*args).item()

        worst = max(worst, rel_error(tensors[k].grad, numeric_grad(f, a, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
