"""Dense linear-algebra kernel.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Bases are
wrapped in :class:`OrthonormalBasis` so that downstream code can rely on the
orthonormality invariant and on a deterministic sign convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, NonFiniteInput

RANK_RTOL = 1e-8


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array (copying only if needed)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput(f"{name} contains non-finite entries")
    return a


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class OrthonormalBasis:
    """``dim x rank`` matrix with orthonormal columns."""

    columns: np.ndarray

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        if cols.ndim != 2:
            raise InvalidInput(f"basis columns must be 2-D, got shape {cols.shape}")
        object.__setattr__(self, "columns", _freeze(cols))

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def rank(self) -> int:
        return self.columns.shape[1]

    @classmethod
    def empty(cls, dim: int) -> "OrthonormalBasis":
        return cls(np.zeros((dim, 0)))

    def concat(self, other: "OrthonormalBasis") -> np.ndarray:
        """Column-wise concatenation; the result is generally *not* orthonormal."""
        return np.hstack([self.columns, other.columns])


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.V.T


def _sign_normalize(V: np.ndarray, U: np.ndarray | None = None):
    # largest-|.| entry of each column made positive; argmax picks lowest index on ties
    if V.shape[1] == 0:
        return V, U
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    V = V * signs
    if U is not None:
        U = U * signs
    return V, U


def svd(M) -> SvdResult:
    """Thin SVD with deterministic signs (LAPACK divide-and-conquer bidiagonalisation)."""
    M = as_matrix(M)
    if M.size == 0:
        raise InvalidInput(f"cannot decompose empty matrix of shape {M.shape}")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    V, U = _sign_normalize(Vt.T, U)
    return SvdResult(_freeze(U), _freeze(s), _freeze(V))


def numerical_rank(singular_values: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.asarray(singular_values)
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def top_right_singular_vectors(M, r: int) -> OrthonormalBasis:
    """Top ``min(r, numerical_rank(M))`` right singular vectors of ``M``.

    Asking for more directions than the matrix carries returns fewer columns;
    the basis is never padded.
    """
    if r < 0:
        raise InvalidInput(f"requested rank must be >= 0, got {r}")
    res = svd(M)
    k = min(r, numerical_rank(res.singular_values))
    return OrthonormalBasis(res.V[:, :k])


def complement_projector(V: OrthonormalBasis) -> np.ndarray:
    """``I - V V^T``, the orthogonal projector onto the complement of span(V)."""
    C = V.columns
    P = np.eye(V.dim) - C @ C.T
    # exact symmetry regardless of rounding in the product
    return 0.5 * (P + P.T)


def subspace_affinity(V_d: OrthonormalBasis, V_hat: OrthonormalBasis) -> float:
    """Normalised overlap ``||V_hat^T V_d||_F^2 / rank(V_d)``, in [0, 1]."""
    if V_d.rank == 0:
        raise InvalidInput("reference basis V_d has rank 0")
    if V_d.dim != V_hat.dim:
        raise InvalidInput(f"ambient dimensions differ: {V_d.dim} vs {V_hat.dim}")
    G = V_hat.columns.T @ V_d.columns
    val = float(np.sum(G * G)) / V_d.rank
    return min(max(val, 0.0), 1.0)


def spectral_norm(M) -> float:
    M = as_matrix(M)
    if M.size == 0:
        raise InvalidInput("empty matrix")
    return float(np.linalg.svd(M, compute_uv=False)[0])


def principal_angle_sines(V1: OrthonormalBasis, V2: OrthonormalBasis) -> np.ndarray:
    """Sines of the principal angles between two subspaces, ascending in angle."""
    cos = np.linalg.svd(V1.columns.T @ V2.columns, compute_uv=False)
    cos = np.clip(cos, 0.0, 1.0)
    k = min(V1.rank, V2.rank)
    cos = np.concatenate([cos, np.zeros(k - cos.size)]) if cos.size < k else cos[:k]
    return np.sqrt(np.clip(1.0 - cos ** 2, 0.0, 1.0))


def orthonormalize(M) -> OrthonormalBasis:
    """Orthonormal basis for the column space of ``M``."""
    M = as_matrix(M)
    if M.shape[1] == 0:
        return OrthonormalBasis.empty(M.shape[0])
    res = svd(M)
    k = numerical_rank(res.singular_values)
    return OrthonormalBasis(res.U[:, :k])
