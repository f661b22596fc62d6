"""Dense linear algebra helpers used by the regularizers.

Matrices are plain 2-D ``float64`` numpy arrays.  The spectral quantities are
computed by power iteration on ``W^T W`` from a fixed start vector so results
are reproducible bit-for-bit on a given platform.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

DEFAULT_MAX_ITERS = 1000
DEFAULT_TOL = 1e-9


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's precondition."""


class SingularTriplet(NamedTuple):
    sigma: float
    u: np.ndarray  # left singular vector, shape (rows,)
    v: np.ndarray  # right singular vector, shape (cols,)
    iters: int


def as_mat(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(np.sqrt(np.sum(w * w)))


def top_singular(w, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> SingularTriplet:
    """Largest singular value of ``w`` with its singular vectors.

    Power iteration runs on the Gram matrix ``w^T w`` starting from the
    normalized all-ones vector.  Iteration stops once two successive
    estimates differ by less than ``tol``, both in ``sigma`` and in every
    entry of ``v``, or after ``max_iters`` multiplies.  Checking ``v`` matters
    because ``sigma`` converges quadratically faster than the vectors that
    the penalty gradients are built from.  A zero matrix returns ``sigma = 0`` and zero
    vectors without iterating.
    """
    w = as_mat(w)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    rows, cols = w.shape
    if not np.any(w):
        return SingularTriplet(0.0, np.zeros(rows), np.zeros(cols), 0)

    gram = w.T @ w
    v = np.full(cols, 1.0 / np.sqrt(cols))
    sigma = 0.0
    iters = 0
    for iters in range(1, max_iters + 1):
        gv = gram @ v
        nrm = np.linalg.norm(gv)
        if nrm == 0.0:
            # start vector orthogonal to the row space; restart on a basis vector
            v = np.zeros(cols)
            v[int(np.argmax(np.sum(w * w, axis=0)))] = 1.0
            continue
        new_v = gv / nrm
        new_sigma = float(np.sqrt(max(new_v @ gram @ new_v, 0.0)))
        done = abs(new_sigma - sigma) < tol and float(np.max(np.abs(new_v - v))) < tol
        sigma, v = new_sigma, new_v
        if done:
            break
    wv = w @ v
    sigma = float(np.linalg.norm(wv))
    u = wv / sigma
    return SingularTriplet(sigma, u, v, iters)


def spectral_norm(w, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> float:
    return top_singular(w, max_iters, tol).sigma


def stable_rank(w, max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL) -> float:
    """``||w||_F^2 / sigma_max(w)^2``; undefined (raises) for a zero matrix."""
    w = as_mat(w)
    sigma = spectral_norm(w, max_iters, tol)
    if sigma == 0.0:
        raise ValueError("stable rank is undefined for a zero matrix")
    return float(np.sum(w * w)) / sigma**2
