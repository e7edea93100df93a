import numpy as np
import pytest
from gradcases import CASES
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import check_grads
from peftlab import tensor as T
from peftlab.errors import ContractError, NumericError, ShapeError
from peftlab.tensor import Parameter, Tensor, no_grad


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# -- matmul -------------------------------------------------------------------


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_identity_and_zeros(rng):
    m = rng.normal(size=(3, 4))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    assert np.array_equal(T.matmul(Tensor(m), Tensor(np.zeros((4, 2)))).data, np.zeros((3, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_matches_triple_loop(n, k, m, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(n, k)), g.normal(size=(k, m))
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# -- softmax / cross-entropy --------------------------------------------------


def test_softmax_uniform_and_limit():
    assert np.allclose(T.softmax(Tensor(np.zeros(7))).data, np.full(7, 1 / 7), atol=1e-15)
    out = T.softmax(Tensor([0.0, 100.0])).data
    assert np.allclose(out, [0.0, 1.0], atol=1e-12)


def test_softmax_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    oracle = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(T.softmax(Tensor(x)).data - oracle)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-12


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        T.softmax(Tensor([0.0, np.nan]))


def test_cross_entropy_uniform_is_log_vocab():
    v = 11
    loss = T.cross_entropy(Tensor(np.zeros((2, 3, v))), np.array([[0, 1, 2], [3, 4, 5]]))
    assert abs(loss.item() - np.log(v)) < 1e-12


def test_cross_entropy_peaked_goes_to_zero():
    logits = np.full((1, 4), -50.0)
    logits[0, 2] = 50.0
    assert T.cross_entropy(Tensor(logits), np.array([2])).item() < 1e-12


def test_cross_entropy_two_token_oracle():
    logits = np.array([[0.3, -1.2, 2.0], [1.0, 0.5, -0.5]])
    targets = np.array([2, 0])
    per_token = [-np.log(np.exp(r[t]) / np.exp(r).sum()) for r, t in zip(logits, targets)]
    assert abs(T.cross_entropy(Tensor(logits), targets).item() - np.mean(per_token)) <= 1e-12
    assert abs(T.cross_entropy(Tensor(logits), targets, "sum").item() - np.sum(per_token)) <= 1e-12


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ShapeError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1, 2]))
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, -1]), ignore_index=-1)


# -- backward -----------------------------------------------------------------


def test_sum_gradient_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient_is_two_x(rng):
    a = rng.normal(size=5)
    x = Tensor(a, requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2 * a)


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(6 + 27)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_backward_only_touches_reachable(rng):
    a = Tensor(rng.normal(size=3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    _ = b * 2
    (a * a).sum().backward()
    assert b.grad is None and a.grad is not None


def test_grad_shape_matches_data(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4,)), requires_grad=True)
    (x * w).mean().backward()
    assert x.grad.shape == x.shape and w.grad.shape == w.shape


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_frozen_parameter_gets_no_gradient(rng):
    w = Parameter(rng.normal(size=(3, 3)))
    w.freeze()
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    T.matmul(x, w).sum().backward()
    assert w.grad is None and x.grad is not None


@pytest.mark.parametrize("name,build,make", CASES, ids=[c[0] for c in CASES])
def test_finite_difference(name, build, make):
    for seed in range(3):
        arrays_ = make(np.random.default_rng([seed, len(name)]))
        assert check_grads(build, arrays_) < 1e-4, name
