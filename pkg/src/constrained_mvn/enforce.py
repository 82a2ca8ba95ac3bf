"""Post-processors that make any mean/covariance pair satisfy
``Sigma mu = mu`` and ``|Sigma| = 1`` exactly.

* :func:`modify_m1` keeps the mean and re-aligns the covariance eigenbasis so
  that the mean direction becomes a unit-eigenvalue eigenvector.
* :func:`modify_m2` projects the mean onto the single best eigenvector.
* :func:`modify_m3` regresses the mean on a selected group of eigenvectors,
  re-orthogonalizes that group around the fitted mean and re-estimates its
  eigenvalues.

In every modifier the rank-one term carrying the mean is the unit projector
``u u^T`` with ``u = mu / |mu|``, so the constraints hold for any mean scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ContractError, DegenerateMeanError, DomainError
from .likelihood import ConstraintResiduals, EstimatePair, constraint_residuals
from .linalg import orthonormalize, from_spectrum, is_positive_definite, spectral_decompose

Strategy = Literal["gap", "kmeans2"]


@dataclass
class ModifiedEstimate:
    """Output of a modifier.

    ``selected_indices`` holds the chosen eigenvector indices (0-based, into
    the descending spectrum of the input covariance): the set ``S`` for M3,
    ``(i0,)`` for M2 and ``()`` for M1. ``basis`` has the final orthonormal
    eigenvectors as columns with the mean direction last, and ``eigenvalues``
    the matching eigenvalues of the returned covariance.
    """

    estimate: EstimatePair
    method: str
    selected_indices: tuple[int, ...]
    lambda_pr: float
    basis: np.ndarray
    eigenvalues: np.ndarray
    lambda_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    criterion: np.ndarray | None = None
    residuals: ConstraintResiduals | None = None

    def __post_init__(self):
        self.residuals = constraint_residuals(self.estimate)

    @property
    def pd_flag(self) -> bool:
        return is_positive_definite(self.estimate.cov)

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "mean": self.estimate.mean.tolist(),
            "cov": self.estimate.cov.tolist(),
            "selected_indices": list(self.selected_indices),
            "lambda_pr": self.lambda_pr,
            "lambda_hat": self.lambda_hat.tolist(),
            "residuals": self.residuals.as_dict(),
            "pd": self.pd_flag,
        }


def _check_input(pre: EstimatePair) -> tuple[np.ndarray, np.ndarray]:
    mu = pre.mean
    if not np.any(mu):
        raise DegenerateMeanError("mean is zero, so its direction is undefined")
    if not is_positive_definite(pre.cov):
        raise ContractError("covariance must be symmetric positive definite")
    return mu, pre.cov


def _geometric_mean(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 1.0
    return float(np.exp(np.mean(np.log(values))))


def _assemble(u: np.ndarray, others: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    # Sigma = sum lam_j/lam_pr o_j o_j^T + u u^T with lam_pr the geometric mean.
    lam_pr = _geometric_mean(lam)
    scaled = np.asarray(lam, dtype=float) / lam_pr
    basis = np.column_stack([others, u]) if others.size else u[:, None]
    eig = np.append(scaled, 1.0)
    return from_spectrum(eig, basis), lam_pr, basis, eig


# --- M1 ----------------------------------------------------------------------


def modify_m1(pre: EstimatePair) -> ModifiedEstimate:
    """Keep the mean; rotate the covariance eigenbasis to contain it.

    Gram-Schmidt runs on ``{u, P_{p-1}, ..., P_1}``. The top ``p - 1``
    eigenvalues are carried to the new vectors and rescaled by their
    geometric mean; ``u`` gets eigenvalue 1. If some ``P_j`` is dropped as
    dependent, the completing unit-axis vectors take the dropped eigenvalues.
    """
    mu, S = _check_input(pre)
    dec = spectral_decompose(S)
    p = dec.p
    u = mu / np.linalg.norm(mu)
    order = list(range(p - 2, -1, -1))  # P_{p-1}, ..., P_1 (0-based)
    Q, kept = orthonormalize(u, [dec.eigenvectors[:, j] for j in order], complete=True)
    kept_idx = [order[k] for k in kept]
    dropped = [j for j in order if j not in kept_idx]
    lam = dec.eigenvalues[kept_idx + dropped]
    cov, lam_pr, basis, eig = _assemble(u, Q[:, 1:], lam)
    return ModifiedEstimate(EstimatePair(mu.copy(), cov), "M1", (), lam_pr, basis, eig)


# --- M2 ----------------------------------------------------------------------


def m2_criterion(pre: EstimatePair) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients ``c0_i = <P_i, mu>`` and criteria ``(1 - lam_i / c0_i^2)^2``.

    A zero coefficient gives an infinite criterion.
    """
    dec = spectral_decompose(pre.cov)
    c0 = dec.eigenvectors.T @ pre.mean
    crit = np.full(dec.p, np.inf)
    nz = c0 != 0.0
    crit[nz] = (1.0 - dec.eigenvalues[nz] / c0[nz] ** 2) ** 2
    return c0, crit


def modify_m2(pre: EstimatePair, rank_one: Literal["unit", "printed"] = "unit") -> ModifiedEstimate:
    """Project the mean onto the eigenvector ``P_i0`` minimizing the criterion.

    ``rank_one="printed"`` uses ``mu* mu*^T`` instead of the unit projector;
    the constraints then hold only when ``|mu*| = 1``. It exists to compare
    against the error bound stated for that form.
    """
    if rank_one not in ("unit", "printed"):
        raise ContractError(f"unknown rank_one {rank_one!r}")
    mu, S = _check_input(pre)
    dec = spectral_decompose(S)
    c0, crit = m2_criterion(pre)
    if not np.any(np.isfinite(crit)):
        raise DegenerateMeanError("mean is orthogonal to every eigenvector")
    i0 = int(np.argmin(crit))  # first minimum on ties
    P = dec.eigenvectors
    mu_star = c0[i0] * P[:, i0]
    rest = [j for j in range(dec.p) if j != i0]
    u = P[:, i0] * np.sign(c0[i0])
    lam = dec.eigenvalues[rest]
    cov, lam_pr, basis, eig = _assemble(u, P[:, rest], lam)
    if rank_one == "printed":
        eig = eig.copy()
        eig[-1] = c0[i0] ** 2
        cov = from_spectrum(eig, basis)
    return ModifiedEstimate(
        EstimatePair(mu_star, cov), "M2" if rank_one == "unit" else "M2-printed",
        (i0,), lam_pr, basis, eig, criterion=crit,
    )


def m2_error_bound(pre: EstimatePair, out: ModifiedEstimate) -> float:
    """``|1 - 1/lam_pr| |sum_{i != i0} lam_i P_i P_i^T|_F + |lam_i0/c0^2 - 1| |mu* mu*^T|_F``."""
    dec = spectral_decompose(pre.cov)
    (i0,) = out.selected_indices
    rest = [j for j in range(dec.p) if j != i0]
    P = dec.eigenvectors[:, rest]
    first = abs(1.0 - 1.0 / out.lambda_pr) * np.linalg.norm((P * dec.eigenvalues[rest]) @ P.T)
    c2 = float(out.estimate.mean @ out.estimate.mean)
    second = abs(dec.eigenvalues[i0] / c2 - 1.0) * c2
    return float(first + second)


# --- M3 ----------------------------------------------------------------------


def select_basis(coeffs: np.ndarray, strategy: Strategy = "kmeans2") -> tuple[int, ...]:
    """Split ``|c|`` into a high and a low group and return the high indices.

    ``"gap"`` cuts the descending sort at its largest consecutive drop;
    ``"kmeans2"`` picks the sorted split with the smallest within-group sum of
    squares (exact 1-d two-means). Ties go to the earliest split and equal
    magnitudes keep index order. If all magnitudes are equal every index is
    returned. Output indices are ascending.
    """
    c = np.abs(np.asarray(coeffs, dtype=float).ravel())
    if c.size == 0 or not np.any(c):
        raise DomainError("coefficients must not all be zero")
    if strategy not in ("gap", "kmeans2"):
        raise ContractError(f"unknown strategy {strategy!r}")
    order = np.argsort(-c, kind="stable")
    s = c[order]
    if s[0] == s[-1]:
        return tuple(range(c.size))
    if strategy == "gap":
        k = int(np.argmax(s[:-1] - s[1:])) + 1
    else:
        k = kmeans2_split(s)
    return tuple(sorted(int(i) for i in order[:k]))


def kmeans2_split(sorted_desc: np.ndarray) -> int:
    """Size of the leading group in the optimal two-group split of a sorted vector."""
    s = np.asarray(sorted_desc, dtype=float)
    m = s.size
    cs = np.cumsum(s)
    cs2 = np.cumsum(s * s)
    k = np.arange(1, m)
    left = cs2[k - 1] - cs[k - 1] ** 2 / k
    right = (cs2[-1] - cs2[k - 1]) - (cs[-1] - cs[k - 1]) ** 2 / (m - k)
    return int(np.argmin(left + right)) + 1


def modify_m3(pre: EstimatePair, strategy: Strategy = "kmeans2") -> ModifiedEstimate:
    """Regression-based re-alignment with basis selection.

    With ``c = P^T mu`` the indices ``S`` come from :func:`select_basis`. The
    fitted mean is ``mu* = P_S P_S^T mu``. Gram-Schmidt on ``mu*`` followed by
    the selected eigenvectors other than the one with the largest ``|beta|``
    yields ``b_1, ..., b_{j0-1}``, whose eigenvalues are re-estimated as
    ``b_k^T Sigma b_k`` against the input covariance. Eigenvalues outside
    ``S`` are kept. The ``p - 1`` non-unit eigenvalues are divided by their
    geometric mean so that the determinant is one.
    """
    mu, S = _check_input(pre)
    dec = spectral_decompose(S)
    P = dec.eigenvectors
    c = P.T @ mu
    sel = select_basis(c, strategy)
    PS = P[:, sel]
    beta = PS.T @ mu
    mu_star = PS @ beta
    nm = float(np.linalg.norm(mu_star))
    if nm <= 1e-12 * float(np.linalg.norm(mu)):
        other = "gap" if strategy == "kmeans2" else "kmeans2"
        raise DegenerateMeanError(
            f"mean is orthogonal to the selected eigenvectors; try strategy {other!r}"
        )
    g = int(np.argmax(np.abs(beta)))
    rest = [PS[:, k] for k in range(len(sel)) if k != g]
    Q, _ = orthonormalize(mu_star, rest, complete=False)
    b = Q[:, 1:]
    lam_hat = np.einsum("ik,ij,jk->k", b, S, b) if b.size else np.zeros(0)
    outside = [j for j in range(dec.p) if j not in sel]
    others = np.column_stack([P[:, outside], b]) if outside or b.size else np.zeros((dec.p, 0))
    lam = np.concatenate([dec.eigenvalues[outside], lam_hat])
    cov, lam_pr, basis, eig = _assemble(mu_star / nm, others, lam)
    return ModifiedEstimate(
        EstimatePair(mu_star, cov), "M3-gap" if strategy == "gap" else "M3-kmeans", sel, lam_pr, basis, eig, lambda_hat=lam_hat,
    )


MODIFIERS = {
    "M1": modify_m1,
    "M2": modify_m2,
    "M3-gap": lambda pre: modify_m3(pre, "gap"),
    "M3-kmeans": lambda pre: modify_m3(pre, "kmeans2"),
}


def apply_modifier(name: str, pre: EstimatePair) -> ModifiedEstimate:
    try:
        fn = MODIFIERS[name]
    except KeyError:
        raise ContractError(f"unknown modifier {name!r}; choose from {sorted(MODIFIERS)}") from None
    return fn(pre)
