"""Cyclic Jacobi eigensolver for small symmetric matrices."""

from __future__ import annotations

import numpy as np


def jacobi_eigen(m, tol=1e-12, max_sweeps=100):
    """Eigenvalues and eigenvectors of a symmetric matrix.

    Sweeps over all off-diagonal pairs, zeroing each with a plane rotation,
    until the off-diagonal Frobenius mass falls below ``tol`` times the
    matrix norm.  Returns ``(values, vectors)`` with values unsorted.
    """
    a = np.array(m, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def sym_eigenvalues(m, psd=False, sym_tol=1e-10):
    """Eigenvalues of a symmetric matrix sorted descending.

    With ``psd=True`` values within -1e-10 of zero are clamped to 0 and
    anything more negative is an error.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.size and np.max(np.abs(m - m.T)) > sym_tol:
        raise ValueError("matrix is not symmetric within tolerance")
    vals, _ = jacobi_eigen((m + m.T) / 2.0)
    vals = np.sort(vals)[::-1]
    if psd:
        if vals.size and vals[-1] < -1e-10 * max(1.0, vals[0]):
            raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {vals[-1]:.3e})")
        vals = np.maximum(vals, 0.0)
    return vals
