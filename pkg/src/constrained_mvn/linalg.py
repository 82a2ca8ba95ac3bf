"""Dense symmetric-matrix helpers shared by the estimators and modifiers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

SYMMETRY_TOL = 1e-10
DEPENDENCE_TOL = 1e-10


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenvalues in descending order with matching eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def p(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        P = self.eigenvectors
        return (P * self.eigenvalues) @ P.T


def _square(M: np.ndarray, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    return M


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Return ``(M + M.T) / 2`` with the upper triangle copied from the lower."""
    M = _square(M)
    out = 0.5 * (M + M.T)
    iu = np.triu_indices_from(out, k=1)
    out[iu] = out.T[iu]
    return out


def asymmetry(M: np.ndarray) -> float:
    """Largest absolute entry of ``M - M.T``."""
    M = np.asarray(M, dtype=float)
    return float(np.max(np.abs(M - M.T))) if M.size else 0.0


def spectral_decompose(S: np.ndarray) -> SpectralDecomposition:
    """Eigendecomposition of a symmetric matrix.

    Eigenvalues come back in descending order. Each eigenvector is signed so
    that its largest-magnitude entry is positive (first such entry on ties),
    which makes downstream traces reproducible.

    Raises
    ------
    ContractError
        If ``S`` is asymmetric beyond ``1e-10`` (scaled by its magnitude).
    """
    S = _square(S)
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if asymmetry(S) > SYMMETRY_TOL * scale:
        raise ContractError(
            f"matrix is not symmetric (max |S - S^T| = {asymmetry(S):.3e})"
        )
    w, V = np.linalg.eigh(symmetrize(S))
    w = w[::-1].copy()
    V = V[:, ::-1].copy()
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    V *= signs
    return SpectralDecomposition(w, V)


def from_spectrum(eigenvalues: np.ndarray, eigenvectors: np.ndarray) -> np.ndarray:
    """Rebuild ``P diag(lam) P^T`` as an exactly symmetric matrix."""
    P = np.asarray(eigenvectors, dtype=float)
    return symmetrize((P * np.asarray(eigenvalues, dtype=float)) @ P.T)


def rank_two_eigenvalues(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Non-zero eigenvalues of ``a b^T + b a^T``.

    They are ``a.b + |a||b|`` and ``a.b - |a||b|``; by Cauchy-Schwarz the
    first is non-negative and the second non-positive.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise DimensionError("a and b must have the same length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("rank-two eigenvalues need two nonzero vectors")
    ab = float(a @ b)
    return ab + na * nb, ab - na * nb


def is_positive_definite(M: np.ndarray, tol: float = 0.0) -> bool:
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        return False
    return bool(np.linalg.eigvalsh(symmetrize(M))[0] > tol)


def repair_positive_definite(M: np.ndarray) -> np.ndarray:
    """Make a symmetric matrix of the form ``A + ab^T + ba^T`` positive definite.

    Such a matrix has at most one non-positive eigenvalue. If the smallest
    eigenvalue is positive ``M`` is returned unchanged; otherwise it is
    replaced by the reciprocal of the product of the other ``p - 1``
    eigenvalues (taken before any determinant normalization), keeping the
    eigenvectors.

    Raises
    ------
    ContractError
        If two or more eigenvalues are non-positive.
    """
    M = _square(M)
    dec = spectral_decompose(M)
    lam = dec.eigenvalues
    if lam[-1] > 0.0:
        return M
    if lam.shape[0] > 1 and lam[-2] <= 0.0:
        n_bad = int(np.sum(lam <= 0.0))
        raise ContractError(
            f"{n_bad} non-positive eigenvalues; repair only handles one"
        )
    lam = lam.copy()
    lam[-1] = 1.0 / float(np.prod(lam[:-1]))
    return from_spectrum(lam, dec.eigenvectors)


def orthonormalize(
    first: np.ndarray, rest: Sequence[np.ndarray], *, complete: bool
) -> tuple[np.ndarray, list[int]]:
    # Classical Gram-Schmidt with one re-orthogonalization pass. Returns the
    # basis (columns) and the positions in ``rest`` that survived.
    first = np.asarray(first, dtype=float).ravel()
    p = first.shape[0]
    nf = np.linalg.norm(first)
    if nf == 0.0:
        raise DomainError("Gram-Schmidt starting vector is zero")
    basis = [first / nf]
    kept: list[int] = []
    for i, v in enumerate(rest):
        if len(basis) == p:
            break
        v = np.asarray(v, dtype=float).ravel()
        if v.shape[0] != p:
            raise DimensionError("all vectors must have the same length")
        nv = np.linalg.norm(v)
        if nv == 0.0:
            continue
        Q = np.column_stack(basis)
        r = v - Q @ (Q.T @ v)
        if np.linalg.norm(r) < DEPENDENCE_TOL * nv:
            continue
        r = r - Q @ (Q.T @ r)
        basis.append(r / np.linalg.norm(r))
        kept.append(i)
    if complete:
        for k in range(p):
            if len(basis) == p:
                break
            e = np.zeros(p)
            e[k] = 1.0
            Q = np.column_stack(basis)
            r = e - Q @ (Q.T @ e)
            if np.linalg.norm(r) < DEPENDENCE_TOL:
                continue
            r = r - Q @ (Q.T @ r)
            basis.append(r / np.linalg.norm(r))
    return np.column_stack(basis), kept


def gram_schmidt_from(first: np.ndarray, rest: Sequence[np.ndarray]) -> np.ndarray:
    """Orthonormal basis of R^p whose first column is ``first / |first|``.

    The remaining vectors are orthogonalized in the order given. Any vector
    whose residual after projection is below ``1e-10`` times its own norm is
    dropped, and the basis is then completed with unit axes (lowest index
    first). Columns of the result are the basis vectors.
    """
    return orthonormalize(first, rest, complete=True)[0]


def vec(M: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(M, dtype=float).reshape(-1, order="F")


def unvec(v: np.ndarray, p: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape((p, p), order="F")


def commutation_matrix(p: int) -> np.ndarray:
    """``K`` with ``K @ vec(A) == vec(A.T)`` for p-by-p ``A``."""
    K = np.zeros((p * p, p * p))
    idx = np.arange(p * p).reshape((p, p), order="F")
    K[idx.T.ravel(order="F"), idx.ravel(order="F")] = 1.0
    return K
