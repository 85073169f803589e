"""Dense linear-algebra primitives used by every other module.

Matrices are plain float64 numpy arrays in row-major layout; randomness comes
from seeded :class:`numpy.random.Generator` streams so identical seeds give
identical draws everywhere. All functions here are pure.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, InvalidRate, ZeroRow

NORM_EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(values) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise DimensionMismatch("matrix contains non-finite entries")
    return m


def l2_normalize_rows(m) -> np.ndarray:
    """Scale every row to unit L2 norm, preserving direction.

    Raises :class:`ZeroRow` naming the first offending row if any row norm
    falls below 1e-12.
    """
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        raise ZeroRow(int(bad[0]))
    return m / norms[:, None]


def cosine_similarity_matrix(a, b) -> np.ndarray:
    """Pairwise dot products of row-normalized batches: out[i, j] = <a_i, b_j>."""
    a = as_matrix(getattr(a, "matrix", a))
    b = as_matrix(getattr(b, "matrix", b))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(
            f"column counts differ: {a.shape[1]} vs {b.shape[1]}"
        )
    return a @ b.T


def log_softmax_rows(m) -> np.ndarray:
    """Row-wise log-softmax via max subtraction, stable for any finite input."""
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(m) -> np.ndarray:
    return np.exp(log_softmax_rows(m))


def dropout_mask(rng: np.random.Generator, rows: int, cols: int, rate: float) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 with probability `rate`, else
    1/(1-rate), so masked activations keep their expectation."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones((rows, cols), dtype=np.float64)
    keep = rng.random((rows, cols)) >= rate
    return keep.astype(np.float64) / (1.0 - rate)
