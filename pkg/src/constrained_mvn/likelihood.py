"""Multivariate-normal likelihood, derivatives and constraint functions.

Conventions
-----------
``vec`` is column stacking everywhere. Derivatives with respect to the
covariance treat it as an unrestricted p-by-p matrix, so the parameter vector
is ``theta = (mu, vec(Sigma))`` of length ``p + p**2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InsufficientDataError, NumericError
from .linalg import asymmetry, commutation_matrix, is_positive_definite, symmetrize, unvec, vec


@dataclass(frozen=True)
class Dataset:
    """An n-by-p matrix of observations, one row each."""

    rows: np.ndarray

    def __post_init__(self):
        X = np.array(self.rows, dtype=float, copy=True)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DimensionError(f"data must be 2-d, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DimensionError("data contains non-finite entries")
        X.setflags(write=False)
        object.__setattr__(self, "rows", X)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]


def as_dataset(data) -> Dataset:
    return data if isinstance(data, Dataset) else Dataset(data)


@dataclass(frozen=True)
class EstimatePair:
    """A mean vector and covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=float).ravel()
        S = np.asarray(self.cov, dtype=float)
        if S.ndim != 2 or S.shape != (mu.shape[0], mu.shape[0]):
            raise DimensionError(
                f"mean of length {mu.shape[0]} does not match cov of shape {S.shape}"
            )
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", S)

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    @property
    def is_pd(self) -> bool:
        return is_positive_definite(self.cov)

    @property
    def symmetry_gap(self) -> float:
        return asymmetry(self.cov)

    def theta(self) -> np.ndarray:
        return np.concatenate([self.mean, vec(self.cov)])

    @classmethod
    def from_theta(cls, theta: np.ndarray, p: int) -> "EstimatePair":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:p].copy(), unvec(theta[p:], p).copy())


@dataclass(frozen=True)
class SufficientStats:
    mean: np.ndarray
    scatter: np.ndarray
    n: int

    def A(self, mu: np.ndarray | None = None) -> np.ndarray:
        """``sum_i (x_i - mu)(x_i - mu)^T`` computed as ``nS + n d d^T``."""
        if mu is None:
            return self.n * self.scatter
        d = self.mean - np.asarray(mu, dtype=float)
        return self.n * self.scatter + self.n * np.outer(d, d)


def _moments(data) -> SufficientStats:
    X = as_dataset(data).rows
    xbar = X.mean(axis=0)
    R = X - xbar
    return SufficientStats(xbar, symmetrize(R.T @ R / X.shape[0]), X.shape[0])


def sufficient_stats(data) -> SufficientStats:
    """Sample mean and scatter matrix ``S = A(xbar) / n`` (divisor n)."""
    X = as_dataset(data).rows
    n = X.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {n}")
    xbar = X.mean(axis=0)
    R = X - xbar
    return SufficientStats(xbar, symmetrize(R.T @ R / n), n)


def _inverse(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    try:
        cond = np.linalg.cond(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance not invertible: {exc}") from exc
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericError(f"covariance is singular (condition number {cond:.3e})")
    return np.linalg.inv(S)


def log_likelihood(est: EstimatePair, data) -> float:
    """Gaussian log-likelihood without the ``2 pi`` constant."""
    X = as_dataset(data).rows
    Sigma = est.cov
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        raise NumericError(
            f"covariance is not positive definite (det sign {sign:+.0f}, "
            f"condition {np.linalg.cond(Sigma):.3e})"
        )
    Sinv = _inverse(Sigma)
    R = X - est.mean
    quad = np.einsum("ij,jk,ik->", R, Sinv, R)
    return float(-0.5 * X.shape[0] * logdet - 0.5 * quad)


def score(est: EstimatePair, data) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the log-likelihood.

    Returns ``(d_mu, d_Sigma)`` with ``d_mu = n Sigma^{-1}(xbar - mu)`` and
    ``d_Sigma = -(n Sigma^{-1} - Sigma^{-1} A(mu) Sigma^{-1}) / 2``. For an
    asymmetric argument the transposed inverse is used so the result stays
    the exact gradient over unrestricted matrices.
    """
    stats = _moments(data)
    n = stats.n
    Sinv = _inverse(est.cov)
    SinvT = Sinv.T
    d = stats.mean - est.mean
    d_mu = 0.5 * n * (Sinv + SinvT) @ d
    A = stats.A(est.mean)
    d_Sigma = -0.5 * (n * SinvT - SinvT @ A @ SinvT)
    return d_mu, d_Sigma


def _bilinear_trace_matrix(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    # Matrix M with vec(X)^T M vec(Y) = tr(P X Q Y) under column stacking.
    p = P.shape[0]
    T = np.einsum("da,bc->badc", P, Q)
    return T.reshape(p * p, p * p)


@dataclass(frozen=True)
class HessianBlocks:
    mu_mu: np.ndarray
    mu_sigma: np.ndarray
    sigma_mu: np.ndarray
    sigma_sigma: np.ndarray

    def full(self) -> np.ndarray:
        return np.block([[self.mu_mu, self.mu_sigma], [self.sigma_mu, self.sigma_sigma]])


def hessian_blocks(est: EstimatePair, data) -> HessianBlocks:
    """Second derivatives of the log-likelihood in ``(mu, vec(Sigma))``.

    The covariance block is
    ``n/2 M(Si, Si) - 1/2 M(W, Si) - 1/2 M(Si, W)`` with ``W = Si A(mu) Si``
    and ``M(P, Q)`` the matrix of ``(X, Y) -> tr(P X Q Y)``; equivalently
    ``K [n Si(x)Si - W(x)Si - Si(x)W] / 2`` with ``K`` the commutation matrix.
    """
    stats = _moments(data)
    n = stats.n
    p = est.p
    Si = _inverse(est.cov)
    if asymmetry(est.cov) > 1e-12 * max(1.0, float(np.abs(est.cov).max())):
        raise DimensionError("hessian_blocks expects a symmetric covariance")
    Si = symmetrize(Si)
    w = Si @ (stats.mean - est.mean)
    mu_mu = -n * Si
    # d/dSigma_cd of n Si (xbar - mu), row k: -n/2 (Si_ck w_d + w_c Si_dk)
    ms = -0.5 * n * (np.einsum("ck,d->kcd", Si, w) + np.einsum("c,dk->kcd", w, Si))
    mu_sigma = ms.transpose(0, 2, 1).reshape(p, p * p)
    W = Si @ stats.A(est.mean) @ Si
    ss = (
        0.5 * n * _bilinear_trace_matrix(Si, Si)
        - 0.5 * _bilinear_trace_matrix(W, Si)
        - 0.5 * _bilinear_trace_matrix(Si, W)
    )
    return HessianBlocks(mu_mu, mu_sigma, mu_sigma.T.copy(), ss)


@dataclass(frozen=True)
class ConstraintResiduals:
    h_vec: np.ndarray
    det_gap: float
    mean_norm: float = 1.0

    @property
    def h_norm(self) -> float:
        return float(np.linalg.norm(self.h_vec))

    def satisfied(self, tol: float = 1e-8) -> bool:
        """Both constraints hold: ``|h| <= tol max(1, |mu|)`` and ``det_gap <= tol``."""
        return self.h_norm <= tol * max(1.0, self.mean_norm) and self.det_gap <= tol

    def as_dict(self) -> dict:
        return {"h_vec": self.h_vec.tolist(), "h_norm": self.h_norm, "det_gap": self.det_gap}


def constraint_residuals(est: EstimatePair) -> ConstraintResiduals:
    """``(Sigma mu - mu, | |Sigma| - 1 |)``."""
    h = est.cov @ est.mean - est.mean
    return ConstraintResiduals(
        h, float(abs(np.linalg.det(est.cov) - 1.0)), float(np.linalg.norm(est.mean))
    )


def constraint_jacobian(est: EstimatePair) -> np.ndarray:
    """Jacobian of ``Sigma mu - mu`` in ``theta``: ``[Sigma - I; mu (x) I]``.

    Rows index ``theta``, columns index the ``p`` constraint components.
    """
    p = est.p
    top = (est.cov - np.eye(p)).T
    bottom = np.kron(est.mean[:, None], np.eye(p))
    return np.vstack([top, bottom])


# --- exponential-family (mean-value) parameterization ----------------------


@dataclass(frozen=True)
class NaturalParamState:
    """Canonical statistic ``T``, its expectation ``m`` and covariance ``V``."""

    T: np.ndarray
    m: np.ndarray
    V: np.ndarray
    h_m: float
    grad_h_m: np.ndarray
    grad_h_T: np.ndarray

    @property
    def p(self) -> int:
        return int(round((np.sqrt(1 + 4 * self.m.shape[0]) - 1) / 2))


def canonical_statistic(data) -> np.ndarray:
    """``T = (xbar, vec(sum_i x_i x_i^T / n))``."""
    X = as_dataset(data).rows
    n = X.shape[0]
    return np.concatenate([X.mean(axis=0), vec(symmetrize(X.T @ X / n))])


def mean_value(est: EstimatePair) -> np.ndarray:
    """``m = (mu, vec(Sigma + mu mu^T))``."""
    return np.concatenate([est.mean, vec(est.cov + np.outer(est.mean, est.mean))])


def split_m(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    m = np.asarray(m, dtype=float)
    q = m.shape[0]
    p = int(round((np.sqrt(1 + 4 * q) - 1) / 2))
    if p + p * p != q:
        raise DimensionError(f"length {q} is not p + p^2")
    return m[:p], m[p:], p


def estimate_from_m(m: np.ndarray) -> EstimatePair:
    """Invert ``mean_value``: ``mu = m1``, ``Sigma = unvec(m2) - m1 m1^T``."""
    m1, m2, p = split_m(m)
    return EstimatePair(m1.copy(), unvec(m2, p) - np.outer(m1, m1))


def h_scalar(m: np.ndarray) -> float:
    """``[m2 - m1 (x) m1 - vec(I)]^T (1 (x) m1)``, i.e. ``tr[(Sigma - I) mu 1^T]``."""
    m1, m2, p = split_m(m)
    ones = np.ones(p)
    return float((m2 - np.kron(m1, m1) - vec(np.eye(p))) @ np.kron(ones, m1))


def grad_h_scalar(m: np.ndarray) -> np.ndarray:
    """Gradient of ``h_scalar``.

    ``dh/dm1 = (1 (x) I)^T (m2 - vec I) - (1 (x) I)^T (m1 (x) m1)
    - (m1 (x) I + I (x) m1)^T (1 (x) m1)`` and ``dh/dm2 = 1 (x) m1``.
    """
    m1, m2, p = split_m(m)
    ones = np.ones((p, 1))
    I = np.eye(p)
    one_kron_I = np.kron(ones, I)
    c = m1[:, None]
    g1 = (
        one_kron_I.T @ (m2 - vec(I))
        - one_kron_I.T @ np.kron(m1, m1)
        - (np.kron(c, I) + np.kron(I, c)).T @ np.kron(np.ones(p), m1)
    )
    g2 = np.kron(np.ones(p), m1)
    return np.concatenate([g1, g2])


def canonical_covariance(est: EstimatePair, n: int) -> np.ndarray:
    """Covariance of ``T`` for a sample of size ``n`` from ``N(mu, Sigma)``.

    ``V11 = Sigma/n``, ``V21 = (Sigma (x) mu + mu (x) Sigma)/n`` (p^2-by-p),
    ``V12 = V21^T`` and
    ``V22 = (I + K)[Sigma (x) Sigma + Sigma (x) mu mu^T + mu mu^T (x) Sigma]/n``.
    """
    p = est.p
    Sigma = symmetrize(est.cov)
    mu = est.mean[:, None]
    mm = mu @ mu.T
    V11 = Sigma / n
    V21 = (np.kron(Sigma, mu) + np.kron(mu, Sigma)) / n
    K = commutation_matrix(p)
    V22 = (np.eye(p * p) + K) @ (np.kron(Sigma, Sigma) + np.kron(Sigma, mm) + np.kron(mm, Sigma)) / n
    V = np.block([[V11, V21.T], [V21, V22]])
    return 0.5 * (V + V.T)


def natural_param_maps(est: EstimatePair, data) -> NaturalParamState:
    """Bundle ``T``, ``m``, ``V``, ``h(m)``, ``grad h(m)`` and ``grad h(T)``."""
    ds = as_dataset(data)
    if ds.p != est.p:
        raise DimensionError("estimate and data dimensions differ")
    T = canonical_statistic(ds)
    m = mean_value(est)
    V = canonical_covariance(est, ds.n)
    return NaturalParamState(T, m, V, h_scalar(m), grad_h_scalar(m), grad_h_scalar(T))
