"""Minimal dense linear algebra used by every other module.

Matrices are plain 2-D numpy arrays of float64 (row-major).  All public
functions validate that inputs and outputs are finite, and are pure:
they never modify their arguments, so they are safe to call from
multiple threads.
"""

from __future__ import annotations

import numpy as np

# Singular values below RCOND * sigma_max are treated as zero when
# solving least-squares problems.  This keeps rank-deficient systems
# deterministic and makes exact duplicates recover unit-vector solutions.
RCOND = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, raising ValueError otherwise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def ols_min_norm(A, b) -> tuple[np.ndarray, float]:
    """Minimum-norm least-squares solution of A x = b.

    Returns (x, residual) where x minimizes ||A x - b||_2 and, among all
    minimizers, has the smallest l2 norm; residual is ||A x - b||_2.
    Solved through the SVD pseudoinverse with singular values below
    RCOND * sigma_max zeroed, so an all-zero A yields x = 0 with
    residual ||b|| rather than an error.
    """
    A = as_matrix(A, "A")
    b = as_vector(b, "b")
    n, p = A.shape
    if n < 1 or p < 1:
        raise ValueError(f"A must be at least 1x1, got {n}x{p}")
    if b.shape[0] != n:
        raise ValueError(f"dimension mismatch: A is {n}x{p}, b has length {b.shape[0]}")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size and s[0] > 0:
        keep = s > RCOND * s[0]
    else:
        keep = np.zeros_like(s, dtype=bool)
    x = Vt[keep].T @ ((U[:, keep].T @ b) / s[keep]) if keep.any() else np.zeros(p)
    residual = float(np.linalg.norm(A @ x - b))
    if not np.all(np.isfinite(x)):
        raise ValueError("least-squares solution is non-finite")
    return x, residual


def truncated_svd(X, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-r factorization X ~= Y @ Z (Eckart-Young optimal).

    Singular values are split symmetrically: Y = U_r sqrt(S_r) and
    Z = sqrt(S_r) V_r^T, which balances the factor norms.
    """
    X = as_matrix(X, "X")
    n, p = X.shape
    if not 1 <= r <= min(n, p):
        raise ValueError(f"rank r={r} out of range [1, {min(n, p)}] for {n}x{p} matrix")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    root = np.sqrt(s[:r])
    Y = U[:, :r] * root
    Z = root[:, None] * Vt[:r]
    return Y, Z
