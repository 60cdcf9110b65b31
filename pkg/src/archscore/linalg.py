"""Small linear-algebra helpers used by the estimators."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def symmetric_eigenvalues(a: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Eigenvalues of a real symmetric matrix, ascending.

    Rejects inputs that are asymmetric beyond ``tol`` (absolute, relative
    to the largest magnitude entry for non-tiny matrices).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()) if a.size else 1.0)
    if float(np.abs(a - a.T).max() if a.size else 0.0) > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return np.linalg.eigvalsh(a)


def covariance_rows(j: np.ndarray) -> np.ndarray:
    """Covariance between the rows of ``j`` (N observations live in columns)."""
    j = np.asarray(j, dtype=np.float64)
    if j.ndim != 2 or j.shape[0] < 2:
        raise ShapeError(f"need a 2D matrix with >=2 rows, got shape {j.shape}")
    centered = j - j.mean(axis=1, keepdims=True)
    denom = max(j.shape[1] - 1, 1)
    return centered @ centered.T / denom
