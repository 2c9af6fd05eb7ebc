"""
Dense weighted linear algebra used by the operator and influence modules.

All inner products are weighted: <f, g>_w = sum(w * f * g). Orthonormal bases
are returned as column matrices in function coordinates.
"""

import logging
from typing import Tuple

import numpy as np

logger = logging.getLogger("Fusion.Linalg")

RANK_TOLERANCE = 1e-9


def weighted_gram_schmidt(
    vectors: np.ndarray, weights: np.ndarray, tol: float = RANK_TOLERANCE
) -> np.ndarray:
    """Orthonormalize columns under the weighted inner product.

    Modified Gram-Schmidt followed by one reorthogonalization pass. A column is
    dropped when its residual norm falls below ``tol`` times its original norm.

    Args:
        vectors: Matrix whose columns are the candidate vectors.
        weights: Nonnegative cell weights.
        tol: Relative drop threshold.

    Returns:
        Matrix with orthonormal columns spanning the same space.
    """
    vectors = np.asarray(vectors, dtype=float)
    n = weights.shape[0]
    if vectors.ndim == 1:
        vectors = vectors[:, None]
    scale = np.sqrt(weights)
    basis = np.zeros((n, min(n, vectors.shape[1])))
    rank = 0
    dropped = 0
    for column in vectors.T:
        v = scale * column
        norm0 = np.linalg.norm(v)
        if norm0 == 0.0:
            dropped += 1
            continue
        for i in range(rank):
            v = v - (basis[:, i] @ v) * basis[:, i]
        if rank:
            v = v - basis[:, :rank] @ (basis[:, :rank].T @ v)
        norm = np.linalg.norm(v)
        if norm <= tol * norm0 or rank == n:
            dropped += 1
            continue
        basis[:, rank] = v / norm
        rank += 1
    if dropped:
        logger.debug(f"Gram-Schmidt dropped {dropped} dependent vectors")
    inv_scale = np.divide(1.0, scale, out=np.zeros_like(scale), where=scale > 0)
    return basis[:, :rank] * inv_scale[:, None]


def numerical_rank(matrix: np.ndarray, rtol: float = RANK_TOLERANCE) -> int:
    """Rank by singular values above ``rtol`` times the largest one."""
    if matrix.size == 0:
        return 0
    s = np.linalg.svd(matrix, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def min_norm_lstsq(
    design: np.ndarray, target: np.ndarray, weights: np.ndarray, rtol: float = RANK_TOLERANCE
) -> Tuple[np.ndarray, float]:
    """Minimum-norm weighted least squares.

    Returns:
        Coefficients and the weighted residual norm.
    """
    scale = np.sqrt(weights)
    if design.shape[1] == 0:
        return np.zeros(0), float(np.linalg.norm(scale * target))
    a = scale[:, None] * design
    b = scale * target
    coef, *_ = np.linalg.lstsq(a, b, rcond=rtol)
    return coef, float(np.linalg.norm(a @ coef - b))


def weighted_norm(f: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sqrt(np.sum(weights * f * f)))


def project(basis: np.ndarray, weights: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto the span of an orthonormal basis."""
    if basis.shape[1] == 0:
        return np.zeros_like(f, dtype=float)
    return basis @ (basis.T @ (weights * f))


def subspace_intersection(
    first: np.ndarray, second: np.ndarray, weights: np.ndarray, tol: float = RANK_TOLERANCE
) -> np.ndarray:
    """Orthonormal basis of the intersection of two orthonormal column spaces.

    Uses principal angles: directions with cosine 1 within ``tol``.
    """
    n = weights.shape[0]
    if first.shape[1] == 0 or second.shape[1] == 0:
        return np.zeros((n, 0))
    cross = first.T @ (weights[:, None] * second)
    u, s, _ = np.linalg.svd(cross)
    keep = s >= 1.0 - tol
    return first @ u[:, : s.shape[0]][:, keep]


def orthogonal_complement(
    basis: np.ndarray, weights: np.ndarray, ambient: np.ndarray, tol: float = RANK_TOLERANCE
) -> np.ndarray:
    """Orthonormal basis of span(ambient) minus span(basis)."""
    if basis.shape[1]:
        ambient = ambient - basis @ (basis.T @ (weights[:, None] * ambient))
    return weighted_gram_schmidt(ambient, weights, tol)


def pinv_solve(
    matrix: np.ndarray, rhs: np.ndarray, rtol: float = RANK_TOLERANCE
) -> Tuple[np.ndarray, float, int]:
    """Moore-Penrose solve.

    Returns:
        Solution, residual norm and the number of truncated singular values.
    """
    if matrix.size == 0:
        return np.zeros(matrix.shape[1]), float(np.linalg.norm(rhs)), 0
    s = np.linalg.svd(matrix, compute_uv=False)
    truncated = int(np.sum(s <= rtol * s[0])) if s[0] > 0 else s.shape[0]
    solution = np.linalg.pinv(matrix, rcond=rtol) @ rhs
    residual = float(np.linalg.norm(matrix @ solution - rhs))
    if truncated:
        logger.debug(f"Pseudoinverse truncated {truncated} singular values")
    return solution, residual, truncated
