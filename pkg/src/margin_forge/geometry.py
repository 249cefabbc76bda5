"""Unit-sphere linear algebra shared by every other module.

Vectors are 1-d float arrays, matrices are 2-d with one vector per row.
All functions are pure and never mutate their inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InfeasibleConfigError

DEFAULT_TOL = 1e-9


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d array of row vectors, got shape {a.shape}")
    return a


def row_norms(m) -> np.ndarray:
    return np.linalg.norm(_as_matrix(m), axis=1)


def normalize_rows(m) -> np.ndarray:
    """Scale each row to unit Euclidean norm, preserving direction."""
    a = _as_matrix(m)
    norms = np.linalg.norm(a, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DegenerateInputError(f"zero-norm row at index {int(bad[0])}")
    return a / norms[:, None]


def angle(u, v) -> float:
    """Angle in radians between two nonzero vectors, in [0, pi].

    The cosine is clamped to [-1, 1] before arccos so numerically exact
    alignments cannot produce NaN.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("angle is undefined for a zero vector")
    c = np.clip(float(u @ v) / (nu * nv), -1.0, 1.0)
    return float(np.arccos(c))


def gram(w) -> np.ndarray:
    """Matrix of pairwise inner products G[i, j] = w_i . w_j."""
    a = _as_matrix(w)
    return a @ a.T


def tangent_project(p, g) -> np.ndarray:
    """Project g onto the tangent space of the unit sphere at p (unit norm)."""
    p = np.asarray(p, dtype=float)
    g = np.asarray(g, dtype=float)
    return g - (g @ p) * p


def tangent_project_rows(points, grads) -> np.ndarray:
    """Row-wise tangent_project for matrices of unit rows."""
    points = _as_matrix(points)
    grads = _as_matrix(grads)
    radial = np.sum(points * grads, axis=1, keepdims=True)
    return grads - radial * points


def centroid(w) -> np.ndarray:
    """Mean of the rows, (1/k) sum_j w_j."""
    return _as_matrix(w).mean(axis=0)


def simplex_etf(k: int, d: int) -> np.ndarray:
    """k unit vectors in R^d with pairwise inner product exactly -1/(k-1).

    Built analytically from the Helmert basis of the hyperplane orthogonal
    to the all-ones vector, so the construction is deterministic and serves
    as an exact oracle for optimizers. Requires 2 <= k <= d+1.
    """
    if k < 2:
        raise InfeasibleConfigError(f"need k >= 2, got k={k}")
    if k > d + 1:
        raise InfeasibleConfigError(
            f"a regular {k - 1}-simplex does not fit in R^{d} (need k <= d+1)"
        )
    # Helmert rows h_m span 1^perp in R^k; columns give centered unit frames.
    h = np.zeros((k - 1, k))
    for m in range(1, k):
        h[m - 1, :m] = 1.0
        h[m - 1, m] = -m
        h[m - 1] /= np.sqrt(m * (m + 1))
    cols = h.T * np.sqrt(k / (k - 1.0))  # rows now unit with dot -1/(k-1)
    out = np.zeros((k, d))
    out[:, : k - 1] = cols
    return out
