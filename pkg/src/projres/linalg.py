"""Dense linear algebra kernel.

Column-pivoted Householder QR, triangular solves, orthogonal projection onto
the column span of a gradient matrix, numerical rank and vector norms. All
arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import SingularSystemError, UndefinedSimilarityError, ValidationError

DEFAULT_RANK_TOL = 1e-8


def as_matrix(m, name="matrix", allow_empty=False) -> np.ndarray:
    """Return ``m`` as a finite 2-D float64 array or raise ValidationError."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {a.shape}")
    if not allow_empty and (a.shape[0] < 1 or a.shape[1] < 1):
        raise ValidationError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def as_vector(v, name="vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class QrFactors:
    """Thin column-pivoted QR factors: ``m[:, column_permutation] == q @ r``."""

    q: np.ndarray
    r: np.ndarray
    rank: int
    column_permutation: np.ndarray


@dataclass(frozen=True)
class Subspace:
    """Orthonormal basis (``ambient_dim`` x ``rank``) of a linear subspace."""

    basis: np.ndarray
    ambient_dim: int
    rank: int

    @property
    def is_proper(self) -> bool:
        return self.rank < self.ambient_dim

    @classmethod
    def empty(cls, ambient_dim: int) -> "Subspace":
        return cls(np.zeros((ambient_dim, 0)), ambient_dim, 0)


def qr_decompose(m, rank_tol: float = DEFAULT_RANK_TOL) -> QrFactors:
    """Householder QR with column pivoting.

    At step ``j`` the remaining column of largest norm is swapped in, so the
    magnitudes on the diagonal of ``r`` are non-increasing. The numerical rank
    counts diagonal entries larger than ``rank_tol * |r[0, 0]|``.

    Args:
        m: matrix to factor, shape (rows, cols).
        rank_tol: relative pivot tolerance, must be positive.

    Returns:
        QrFactors with ``q`` of shape (rows, k) and ``r`` of shape (k, cols),
        ``k = min(rows, cols)``.
    """
    a = as_matrix(m)
    if not rank_tol > 0:
        raise ValidationError(f"rank_tol must be positive, got {rank_tol}")
    rows, cols = a.shape
    k = min(rows, cols)
    r = a.copy()
    perm = np.arange(cols)
    reflectors = []
    for j in range(k):
        # remaining norms are recomputed rather than downdated: exact, and cheap at desk scale
        rem = np.einsum("ij,ij->j", r[j:, j:], r[j:, j:])
        piv = j + int(np.argmax(rem))
        if piv != j:
            r[:, [j, piv]] = r[:, [piv, j]]
            perm[[j, piv]] = perm[[piv, j]]
        x = r[j:, j]
        normx = np.linalg.norm(x)
        if normx == 0.0:
            break
        v = x.copy()
        v[0] += np.copysign(normx, x[0])
        v /= np.linalg.norm(v)
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        r[j + 1:, j] = 0.0
        reflectors.append(v)

    q = np.eye(rows, k)
    for j in reversed(range(len(reflectors))):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    r = np.triu(r[:k, :])
    # sign convention: non-negative diagonal in r
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q *= signs
    r *= signs[:, None]

    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        rank = 0
    else:
        rank = int(np.count_nonzero(diag > rank_tol * diag[0]))
    return QrFactors(q=q, r=r, rank=rank, column_permutation=perm)


def back_substitute(r, y) -> np.ndarray:
    """Solve the upper-triangular system ``r @ alpha = y``."""
    r = as_matrix(r, "r")
    y = as_vector(y, "y")
    k = r.shape[0]
    if r.shape[1] != k:
        raise ValidationError(f"r must be square, got {r.shape}")
    if y.shape[0] != k:
        raise ValidationError(f"y has length {y.shape[0]}, expected {k}")
    alpha = np.zeros(k)
    for i in range(k - 1, -1, -1):
        d = r[i, i]
        if abs(d) < 1e-300:
            raise SingularSystemError(f"zero pivot at diagonal index {i}")
        alpha[i] = (y[i] - r[i, i + 1:] @ alpha[i + 1:]) / d
    return alpha


def span(m, rank_tol: float = DEFAULT_RANK_TOL) -> Subspace:
    """Orthonormal basis of the column space of ``m``, truncated to its numerical rank.

    A matrix with zero columns (empty batch) gives the empty subspace.
    """
    a = as_matrix(m, allow_empty=True)
    if a.shape[1] == 0 or a.shape[0] == 0:
        return Subspace.empty(a.shape[0])
    f = qr_decompose(a, rank_tol)
    return Subspace(basis=f.q[:, : f.rank].copy(), ambient_dim=a.shape[0], rank=f.rank)


def project_onto(subspace: Subspace, v) -> np.ndarray:
    """Orthogonal projection ``basis @ (basis.T @ v)``.

    ``v`` may be a vector of length ``ambient_dim`` or a 2-D array whose rows
    are such vectors; rows are projected independently.
    """
    a = np.asarray(v, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] != subspace.ambient_dim:
        raise ValidationError(
            f"cannot project shape {a.shape} onto a subspace of R^{subspace.ambient_dim}"
        )
    if not np.all(np.isfinite(a)):
        raise ValidationError("vector contains non-finite entries")
    b = subspace.basis
    if a.ndim == 1:
        return b @ (b.T @ a)
    return (a @ b) @ b.T


def span_coefficients(m, v, rank_tol: float = DEFAULT_RANK_TOL):
    """Least-squares coefficients of ``v`` on the pivot columns of ``m``.

    Solves ``r_kk @ alpha = q_k.T @ v`` by back substitution over the leading
    ``rank`` block. Returns ``(alpha, columns)`` such that
    ``m[:, columns] @ alpha`` is the orthogonal projection of ``v`` onto the
    span of ``m``.
    """
    f = qr_decompose(m, rank_tol)
    v = as_vector(v, "v")
    k = f.rank
    if k == 0:
        return np.zeros(0), f.column_permutation[:0]
    alpha = back_substitute(f.r[:k, :k], f.q[:, :k].T @ v)
    return alpha, f.column_permutation[:k]


def l1_norm(v) -> float:
    return float(np.sum(np.abs(as_vector(v))))


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between two non-zero vectors, clipped to [-1, 1]."""
    u = as_vector(np.ravel(u), "u")
    v = as_vector(np.ravel(v), "v")
    if u.shape != v.shape:
        raise ValidationError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))


def numerical_rank(m, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    a = as_matrix(m, allow_empty=True)
    if a.size == 0:
        return 0
    return qr_decompose(a, rank_tol).rank


class SubspaceProjector(TransformerMixin, BaseEstimator):
    """Project row vectors onto the column span of a fitted matrix.

    ``fit`` takes a matrix whose columns span the subspace (e.g. a weight
    gradient of shape ``(n, m)``); ``transform`` maps rows of shape ``(*, n)``
    to their orthogonal projections and ``residuals`` gives the per-row l1
    distance to the subspace.

    Parameters
    ----------
    rank_tol : float, default=1e-8
        Relative pivot tolerance for the numerical rank of the fitted matrix.
    """

    def __init__(self, rank_tol=DEFAULT_RANK_TOL):
        self.rank_tol = rank_tol

    def fit(self, G, y=None):
        G = as_matrix(G, "G", allow_empty=True)
        self.subspace_ = span(G, self.rank_tol)
        self.n_features_in_ = G.shape[0]
        self.rank_ = self.subspace_.rank
        return self

    def transform(self, X):
        check_is_fitted(self, "subspace_")
        return project_onto(self.subspace_, as_matrix(X, "X"))

    def residuals(self, X):
        X = as_matrix(X, "X")
        return np.sum(np.abs(X - self.transform(X)), axis=1)
