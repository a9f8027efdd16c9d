"""Dense matrix/vector kernel: thin SVD, spectral norm, stable softmax.

Everything works on plain float64 numpy arrays and is pure (no global
state), so values can be shared freely across threads. Matrices here are
desk-scale (at most a few thousand entries per side); sparse or GPU paths
are out of scope.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite 2-D float64 array."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {out.shape}")
    if out.shape[0] < 1 or out.shape[1] < 1:
        raise InvalidInputError(f"{name} must have at least one row and column")
    if not np.all(np.isfinite(out)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return out


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate and convert to a finite 1-D float64 array."""
    out = np.asarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return out


def thin_svd(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD: A = U @ diag(sigma) @ V.T with k = min(rows, cols).

    U is rows x k and V is cols x k, both with orthonormal columns; sigma is
    non-negative and descending. Signs are canonicalized so the largest-
    magnitude entry of each U column is positive, which makes the
    factorization deterministic.
    """
    a = as_matrix(a, "A")
    u, sigma, vt = np.linalg.svd(a, full_matrices=False)
    v = vt.T
    # Canonical signs: per column of U, flip so the dominant entry is >= 0.
    dominant = np.abs(u).argmax(axis=0)
    signs = np.sign(u[dominant, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    v = v * signs
    return u, sigma, v


def spectral_norm(a) -> float:
    """Largest singular value of A."""
    a = as_matrix(a, "A")
    return float(np.linalg.svd(a, compute_uv=False)[0])


def log_sum_exp(v) -> float:
    """log(sum(exp(v))) via max-shift; safe for entries up to |1e6|."""
    v = as_vector(v, "v")
    if v.size == 0:
        raise InvalidInputError("log_sum_exp of an empty vector")
    m = float(v.max())
    return m + float(np.log(np.sum(np.exp(v - m))))


def softmax(v) -> np.ndarray:
    """Shift-invariant softmax; entries positive, summing to 1."""
    v = as_vector(v, "v")
    if v.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    e = np.exp(v - v.max())
    return e / e.sum()
