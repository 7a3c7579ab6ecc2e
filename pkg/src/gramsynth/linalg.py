"""Small dense symmetric linear algebra (d <= 8)."""

from __future__ import annotations

import numpy as np


def symmetrize(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 64):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, v)`` with eigenvalues ascending and orthonormal eigenvectors
    in the columns of ``v``.  Sweeps stop once the off-diagonal Frobenius norm
    drops below ``tol`` times the Frobenius norm of ``a``.
    """
    a = symmetrize(a).copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0.0:
        return np.diag(a).copy(), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def spectral_pinv(a: np.ndarray, rank_tol: float = 1e-12):
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues at or below ``rank_tol * lambda_max`` are treated as zero.
    Returns ``(pinv, rank)``.
    """
    w, v = jacobi_eigh(a)
    lam_max = max(float(w[-1]), 0.0)
    keep = w > rank_tol * lam_max if lam_max > 0 else np.zeros_like(w, dtype=bool)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (v * inv) @ v.T, int(np.count_nonzero(keep))


def spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve with a symmetric positive definite matrix through its eigenbasis."""
    w, v = jacobi_eigh(a)
    return v @ ((v.T @ b) / (w if np.ndim(b) == 1 else w[:, None]))
