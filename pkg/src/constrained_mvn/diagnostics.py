"""Curvature of the profiled Lagrangian and Wishart coverage estimates.

The Lagrangian in the covariance, with the mean fixed, is::

    L(Sigma) = -n/2 log|Sigma| - n/2 tr((S + B) Sigma^{-1}) + alpha2^T (Sigma mu - mu)

with ``B = (xbar - mu)(xbar - mu)^T``. The multiplier term is linear in
``Sigma``, so it never enters a second directional derivative and is omitted
from :func:`directional_curvature`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, NumericError
from .linalg import asymmetry, spectral_decompose, symmetrize

REGION_TOL = 1e-12


@dataclass(frozen=True)
class CurvatureQuery:
    """Inputs of :func:`directional_curvature`.

    ``mean_gap`` is ``B = (xbar - mu)(xbar - mu)^T``; ``None`` means zero.
    """

    sigma: np.ndarray
    direction: np.ndarray
    scatter: np.ndarray
    n: int
    mean_gap: np.ndarray | None = None

    def __post_init__(self):
        D = np.asarray(self.direction, dtype=float)
        if asymmetry(D) > 1e-10 * max(1.0, float(np.abs(D).max(initial=0.0))):
            raise ContractError("direction must be symmetric")
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "direction", D)
        object.__setattr__(self, "scatter", np.asarray(self.scatter, dtype=float))


def in_delta_region(sigma: np.ndarray, scatter: np.ndarray) -> bool:
    """``0 < Sigma < 2S`` in the Loewner order, with margin ``1e-12``."""
    sigma = symmetrize(sigma)
    gap = symmetrize(2.0 * np.asarray(scatter, dtype=float) - sigma)
    return bool(np.linalg.eigvalsh(sigma)[0] > REGION_TOL and np.linalg.eigvalsh(gap)[0] > REGION_TOL)


def lagrangian(sigma: np.ndarray, scatter: np.ndarray, n: int, mean_gap: np.ndarray | None = None) -> float:
    """Profiled Lagrangian without the (linear) multiplier term."""
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        raise NumericError("Sigma is not positive definite")
    M = np.asarray(scatter, dtype=float)
    if mean_gap is not None:
        M = M + mean_gap
    return float(-0.5 * n * logdet - 0.5 * n * np.trace(np.linalg.solve(sigma, M)))


def directional_curvature(query: CurvatureQuery) -> float:
    """``-n/2 tr[(2(S + B) - Sigma) Si D Si D Si]`` with ``Si = Sigma^{-1}``."""
    Sigma = query.sigma
    try:
        cond = np.linalg.cond(Sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"Sigma is singular: {exc}") from exc
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericError(f"Sigma is singular (condition {cond:.3e})")
    Si = np.linalg.inv(Sigma)
    M = query.scatter if query.mean_gap is None else query.scatter + query.mean_gap
    D = query.direction
    K = Si @ D @ Si
    return float(-0.5 * query.n * np.trace((2.0 * M - Sigma) @ K @ D @ Si))


def counterexample_direction(sigma: np.ndarray, scatter: np.ndarray) -> np.ndarray:
    """Direction ``D = Sigma u u^T Sigma`` of non-negative curvature outside the region.

    ``u`` is the eigenvector of the most negative eigenvalue of ``2S - Sigma``.
    """
    sigma = symmetrize(sigma)
    if in_delta_region(sigma, scatter):
        raise ContractError("Sigma lies inside 0 < Sigma < 2S; no such direction exists")
    dec = spectral_decompose(symmetrize(2.0 * np.asarray(scatter, dtype=float) - sigma))
    u = dec.eigenvectors[:, -1]
    v = sigma @ u
    return np.outer(v, v)


@dataclass(frozen=True)
class CoverageEstimate:
    n: int
    p: int
    estimate: float
    stderr: float
    reps: int
    shards: int
    seed: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _coverage_hits(n: int, p: int, reps: int, rng: np.random.Generator) -> int:
    hits = 0
    for _ in range(reps):
        G = rng.standard_normal((n - 1, p))
        if np.linalg.eigvalsh(G.T @ G)[0] > n / 2.0:
            hits += 1
    return hits


def wishart_coverage(n: int, p: int, reps: int = 2000, seed: int = 0, shards: int = 1) -> CoverageEstimate:
    """Monte-Carlo estimate of ``P[lambda_min(W) > n/2]`` with ``W ~ Wishart(n-1, I_p)``.

    Each of ``shards`` blocks draws from its own stream spawned from
    ``seed``, so the result depends on the shard count but not on the order
    in which shards run. Returns the hit fraction and its binomial standard
    error.
    """
    if p < 1 or n <= p:
        raise DomainError(f"need n > p >= 1, got n={n}, p={p}")
    if reps < 100:
        raise DomainError(f"need reps >= 100, got {reps}")
    if shards < 1 or shards > reps:
        raise DomainError(f"need 1 <= shards <= reps, got {shards}")
    children = np.random.SeedSequence(seed).spawn(shards)
    sizes = [reps // shards + (1 if k < reps % shards else 0) for k in range(shards)]
    hits = sum(
        _coverage_hits(n, p, size, np.random.default_rng(child))
        for size, child in zip(sizes, children)
    )
    est = hits / reps
    return CoverageEstimate(n, p, est, float(np.sqrt(est * (1.0 - est) / reps)), reps, shards, seed)
