import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftlab.errors import ContractError
from peftlab.linalg import jacobi_eigh, psd_sqrt, sym_eigen


def test_diagonal_matrix_gives_sorted_diagonal():
    w, v = jacobi_eigh(np.diag([3.0, -1.0, 2.0]))
    assert w.tolist() == [-1.0, 2.0, 3.0]
    assert np.allclose(np.abs(v), np.eye(3)[:, [1, 2, 0]])


def test_identity_eigenvalues_are_one():
    w, v = sym_eigen(np.eye(4))
    assert np.array_equal(w.data, np.ones(4))


def test_3x3_reconstruction(rng):
    a = rng.normal(size=(3, 3))
    s = a + a.T
    w, v = jacobi_eigh(s)
    assert np.max(np.abs(v @ np.diag(w) @ v.T - s)) <= 1e-8
    assert np.max(np.abs(v.T @ v - np.eye(3))) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_reconstruction_and_ascending_order(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    s = a @ a.T - n * np.eye(n) * 0.3
    w, v = jacobi_eigh(s)
    assert np.all(np.diff(w) >= 0)
    assert np.max(np.abs(v @ np.diag(w) @ v.T - s)) <= 1e-8 * max(1.0, np.abs(s).max())


def test_eigenvalues_agree_with_lapack(rng):
    # cross-check only; the reconstruction test above is the oracle
    a = rng.normal(size=(8, 8))
    s = a + a.T
    assert np.allclose(jacobi_eigh(s)[0], np.linalg.eigvalsh(s), atol=1e-10)


def test_repeated_eigenvalues():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    s = q @ np.diag([2.0, 2.0, 2.0, 5.0, 5.0]) @ q.T
    w, v = jacobi_eigh(s)
    assert np.allclose(w, [2, 2, 2, 5, 5], atol=1e-10)


def test_rejects_asymmetric_and_non_square():
    with pytest.raises(ContractError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        jacobi_eigh(np.ones((2, 3)))


def test_psd_sqrt_squares_back(rng):
    a = rng.normal(size=(6, 4))
    s = a @ a.T  # rank 4, PSD
    r = psd_sqrt(s)
    assert np.allclose(r @ r, s, atol=1e-9)
    assert np.allclose(r, r.T)


def test_converges_to_machine_precision():
    # a loose stopping rule leaves ~1e-8 of off-diagonal mass on these
    g = np.random.default_rng(7)
    for _ in range(50):
        n = int(g.integers(2, 7))
        a = g.normal(size=(n, n + 2))
        s = a @ a.T / n
        w, v = jacobi_eigh(s)
        assert np.max(np.abs(v @ np.diag(w) @ v.T - s)) <= 1e-11 * np.abs(s).max()
