"""Symmetric eigendecomposition by cyclic Jacobi rotations."""

import numpy as np

from .errors import ContractError
from .tensor import Tensor

MAX_SWEEPS = 100
OFF_TOL = 1e-12
SYMMETRY_TOL = 1e-9


def _raw(s):
    return s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)


def jacobi_eigh(s, max_sweeps=MAX_SWEEPS, tol=OFF_TOL):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.

    Works on plain ndarrays. Iteration stops once the off-diagonal Frobenius
    norm drops below ``tol`` times the matrix norm, or after ``max_sweeps``.
    """
    a = np.array(s, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"sym_eigen needs a square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > SYMMETRY_TOL * scale:
        raise ContractError("sym_eigen input is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n < 2 or norm == 0.0:
        return np.diag(a).copy(), v

    for _ in range(max_sweeps):
        # summed directly: sum(a^2) - sum(diag^2) cancels catastrophically near convergence
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.hypot(1.0, tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                sn = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - sn * col_q
                a[:, q] = sn * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - sn * row_q
                a[q, :] = sn * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def sym_eigen(s):
    """Tensor-level wrapper around :func:`jacobi_eigh`. Not differentiable."""
    w, v = jacobi_eigh(_raw(s))
    return Tensor(w), Tensor(v)


def psd_sqrt(s):
    """Principal square root of a symmetric PSD matrix, negative eigenvalues clamped."""
    w, v = jacobi_eigh(_raw(s))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
