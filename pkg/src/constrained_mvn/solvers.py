"""Iterative constrained maximum-likelihood solvers.

Four schemes are provided:

* :func:`shape_mle` -- closed form under ``|Sigma| = 1`` alone.
* :func:`intermediate_mle` -- fixed-point iteration on the multiplier for the
  relaxed constraint ``Sigma b = mu``.
* :func:`smle` -- the four-block iteration over ``(alpha1, Sigma, alpha2, mu)``.
* :func:`sc_mle` -- explicit scalar multiplier in the mean-value
  parameterization (double iteration over ``T`` and ``m``).
* :func:`as_mle` -- Newton-type iteration with a once-inverted bordered
  information matrix, restricted to a ball around the starting point.

Every solver returns a :class:`SolverReport`; failures inside the iteration
raise subclasses of :class:`~constrained_mvn.errors.NumericError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    DivergenceError,
    DomainError,
    IllConditionedError,
    NumericError,
    SingularStepError,
)
from .likelihood import (
    ConstraintResiduals,
    Dataset,
    EstimatePair,
    as_dataset,
    canonical_covariance,
    canonical_statistic,
    constraint_jacobian,
    constraint_residuals,
    estimate_from_m,
    grad_h_scalar,
    h_scalar,
    score,
    sufficient_stats,
)
from .linalg import asymmetry, is_positive_definite, repair_positive_definite, symmetrize, vec

DENOMINATOR_TOL = 1e-12
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class SolverConfig:
    """Iteration limits and switches shared by the solvers.

    ``tol`` applies to relative parameter changes
    ``|new - old| <= tol * (1 + |old|)``; ``epsilon`` is the absolute accuracy
    of the double iteration in :func:`sc_mle`.
    """

    max_iter: int = 1000
    tol: float = 1e-6
    inner_max_iter: int = 100
    epsilon: float = 0.1
    mu_update: Literal["printed", "stationarity"] = "printed"
    refresh_every: int = 0
    keep_trace: bool = True
    fallback: Literal["best", "last"] = "best"

    def __post_init__(self):
        if self.max_iter < 0 or self.inner_max_iter < 1:
            raise ContractError("iteration limits must be non-negative (inner >= 1)")
        if self.tol <= 0 or self.epsilon <= 0:
            raise ContractError("tolerances must be positive")
        if self.mu_update not in ("printed", "stationarity"):
            raise ContractError(f"unknown mu_update {self.mu_update!r}")
        if self.fallback not in ("last", "best"):
            raise ContractError(f"unknown fallback {self.fallback!r}")
        if self.refresh_every < 0:
            raise ContractError("refresh_every must be >= 0")


@dataclass(frozen=True)
class LagrangeState:
    alpha1: float
    alpha2: np.ndarray | float

    def as_dict(self) -> dict:
        a2 = self.alpha2
        return {
            "alpha1": float(self.alpha1),
            "alpha2": a2.tolist() if isinstance(a2, np.ndarray) else float(a2),
        }


@dataclass
class SolverReport:
    method: str
    estimate: EstimatePair
    multipliers: LagrangeState
    iterations_used: int
    converged: bool
    converged_blocks: tuple[str, ...] = ()
    residuals: ConstraintResiduals | None = None
    pd_flag: bool = False
    symmetry_gap: float = 0.0
    trace: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        # diagnostics always reflect the returned estimate
        self.residuals = constraint_residuals(self.estimate)
        self.pd_flag = is_positive_definite(self.estimate.cov)
        self.symmetry_gap = asymmetry(self.estimate.cov)

    def as_dict(self, include_trace: bool = False) -> dict:
        out = {
            "method": self.method,
            "mean": self.estimate.mean.tolist(),
            "cov": self.estimate.cov.tolist(),
            "multipliers": self.multipliers.as_dict(),
            "iterations_used": self.iterations_used,
            "converged": self.converged,
            "converged_blocks": list(self.converged_blocks),
            "residuals": self.residuals.as_dict(),
            "pd": self.pd_flag,
            "symmetry_gap": self.symmetry_gap,
        }
        if self.extras:
            out["extras"] = {k: _jsonable(v) for k, v in self.extras.items()}
        if include_trace:
            out["trace"] = [{k: _jsonable(v) for k, v in t.items()} for t in self.trace]
        return out


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def _rel_change(new, old) -> float:
    new = np.asarray(new, dtype=float)
    old = np.asarray(old, dtype=float)
    return float(np.linalg.norm(new - old) / (1.0 + np.linalg.norm(old)))


def _check_sample(ds: Dataset) -> None:
    if ds.n <= ds.p:
        raise DomainError(f"need n > p, got n={ds.n}, p={ds.p}")


def _pth_root_det(U: np.ndarray, what: str, trace=None) -> float:
    sign, logdet = np.linalg.slogdet(U)
    if sign <= 0 or not np.isfinite(logdet):
        raise DivergenceError(
            f"|{what}| <= 0, its p-th root is undefined", trace=trace
        )
    return float(np.exp(logdet / U.shape[0]))


# --- closed form -------------------------------------------------------------


def shape_mle(data) -> SolverReport:
    """MLE under ``|Sigma| = 1`` only: ``(xbar, A(xbar) / |A(xbar)|^{1/p})``."""
    ds = as_dataset(data)
    st = sufficient_stats(ds)
    A = st.A()
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0 or np.linalg.matrix_rank(A) < ds.p:
        raise DomainError("scatter matrix is rank deficient; shape MLE undefined")
    Sigma = symmetrize(A / np.exp(logdet / ds.p))
    return SolverReport(
        "shape", EstimatePair(st.mean, Sigma), LagrangeState(0.0, np.zeros(ds.p)), 0, True
    )


# --- intermediate constraint Sigma b = mu -----------------------------------


def intermediate_mle(
    data,
    b: np.ndarray,
    config: SolverConfig = SolverConfig(),
    variant: Literal["printed", "derived"] = "printed",
) -> SolverReport:
    """Fixed-point iteration ``alpha2 <- f(alpha2)`` starting at ``xbar``.

    With ``mu(a) = xbar - a/n``, ``U(a) = A(mu(a)) + 2 a mu(a)^T`` and
    ``Sigma(a) = U(a)/|U(a)|^{1/p}``, the ``"printed"`` map is::

        f(a) = (|Sigma(a)|^{1/p} xbar - (n-1) S b - a a^T b / n^2)
               / (2 (xbar^T b - a^T b / n) - |Sigma(a)|^{1/p} / n)

    The ``"derived"`` map solves ``U(a) b = |U(a)|^{1/p} mu(a)`` for the
    linear occurrence of ``a``::

        f(a) = (|U|^{1/p} xbar - n S b - a a^T b / n)
               / (2 (xbar^T b - a^T b / n) + |U|^{1/p} / n)

    Only the derived map has the stationarity system as its fixed points.
    """
    if variant not in ("printed", "derived"):
        raise ContractError(f"unknown variant {variant!r}")
    ds = as_dataset(data)
    _check_sample(ds)
    st = sufficient_stats(ds)
    n, p = ds.n, ds.p
    b = np.asarray(b, dtype=float).ravel()
    if b.shape != (p,):
        raise DimensionError(f"b must have length {p}")
    if not np.any(b):
        raise DomainError("b must be nonzero")
    xbar, S = st.mean, st.scatter
    Sb = S @ b

    def pieces(a):
        mu = xbar - a / n
        U = st.A(mu) + 2.0 * np.outer(a, mu)
        c = _pth_root_det(U, "U(alpha2)", trace)
        return mu, U, c

    def f(a):
        mu, U, c = pieces(a)
        ab = float(a @ b)
        if variant == "printed":
            cs = _pth_root_det(U / c, "Sigma(alpha2)", trace)
            num = cs * xbar - (n - 1) * Sb - a * ab / n**2
            den = 2.0 * (float(xbar @ b) - ab / n) - cs / n
        else:
            num = c * xbar - n * Sb - a * ab / n
            den = 2.0 * (float(xbar @ b) - ab / n) + c / n
        if abs(den) < DENOMINATOR_TOL:
            raise SingularStepError("fixed-point denominator vanished", trace=trace)
        return num / den

    trace: list[dict] = []
    alpha = xbar.copy()
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        new = f(alpha)
        if not np.all(np.isfinite(new)):
            raise NumericError("non-finite multiplier iterate", trace=trace)
        change = float(np.linalg.norm(new - alpha))
        alpha = new
        mu, U, c = pieces(alpha)
        if config.keep_trace:
            trace.append(
                {"iter": it, "alpha2_change": change, "intermediate_residual": float(np.linalg.norm(U / c @ b - mu))}
            )
        if change <= config.tol * (1.0 + np.linalg.norm(alpha)):
            converged = True
            break
    mu, U, c = pieces(alpha)
    Sigma = U / c
    return SolverReport(
        f"intermediate-{variant}",
        EstimatePair(mu, Sigma),
        LagrangeState(0.5 * (c - n), alpha),
        it,
        converged,
        ("alpha2",) if converged else (),
        trace=trace,
        extras={
            "intermediate_residual": float(np.linalg.norm(Sigma @ b - mu)),
            "fixed_point_gap": float(np.linalg.norm(f(alpha) - alpha)),
        },
    )


# --- four-block iteration ------------------------------------------------------


SMLE_BLOCKS = ("alpha1", "Sigma", "alpha2", "mu")


def smle(data, config: SolverConfig = SolverConfig()) -> SolverReport:
    """Four-block constrained-MLE iteration.

    Starting from ``(Sigma, alpha2, mu) = (S, xbar, xbar)`` and
    ``alpha1^(0) = alpha1^(1)``, each sweep applies, all right-hand sides at
    step ``k``::

        alpha1' = (|A(mu) + 2 alpha2 mu^T|^{1/p} - n) / 2
        Sigma'  = (A(mu) + 2 alpha2 mu^T) / (n + 2 alpha1)
        alpha2' = ((n + 2 alpha1) Sigma - A(mu)) mu / 2
        mu'     = Sigma (xbar - (I - Sigma) alpha2 / n)

    ``Sigma'`` is symmetrized and, if needed, made positive definite. The
    iteration stops once two of the four blocks have a relative change below
    ``tol`` or after ``max_iter`` sweeps, in which case the last iterate is
    returned with ``converged=False``. With ``mu_update="stationarity"`` the
    leading ``Sigma`` factor of the mean update is dropped.

    Raises
    ------
    DivergenceError
        When a determinant root is undefined or the repair fails. Its
        ``report`` holds the iterate (initial state included) with the
        smallest ``|Sigma mu - mu|`` seen before the failure.
    NumericError
        On a non-finite iterate, with the same ``report``.
    """
    ds = as_dataset(data)
    _check_sample(ds)
    st = sufficient_stats(ds)
    n, p = ds.n, ds.p
    I = np.eye(p)
    xbar = st.mean
    Sigma = st.scatter.copy()
    alpha2 = xbar.copy()
    mu = xbar.copy()
    trace: list[dict] = []
    alpha1 = 0.5 * (_pth_root_det(st.A(mu) + 2.0 * np.outer(alpha2, mu), "A(mu) + 2 alpha2 mu^T", trace) - n)

    def badness(S_, m_):
        return float(np.linalg.norm(S_ @ m_ - m_))

    best = (badness(Sigma, mu), 0, alpha1, Sigma, alpha2, mu)

    def best_report(message):
        _, k, a1, S_, a2, m_ = best
        return SolverReport(
            "SMLE", EstimatePair(m_, S_), LagrangeState(a1, a2), k, False, (),
            trace=trace, extras={"failure": message, "failed_at": len(trace) + 1},
        )

    converged_blocks: tuple[str, ...] = ()
    it = 0
    for it in range(1, config.max_iter + 1):
        try:
            A = st.A(mu)
            U = A + 2.0 * np.outer(alpha2, mu)
            root = _pth_root_det(U, "A(mu) + 2 alpha2 mu^T", trace)
            denom = n + 2.0 * alpha1
            if abs(denom) < DENOMINATOR_TOL:
                raise SingularStepError("n + 2 alpha1 vanished", trace=trace)
            a1_new = 0.5 * (root - n)
            try:
                Sigma_new = repair_positive_definite(symmetrize(U / denom))
            except ContractError as exc:
                raise DivergenceError(str(exc), trace=trace) from exc
            a2_new = 0.5 * (denom * Sigma - A) @ mu
            if config.mu_update == "printed":
                mu_new = Sigma @ (xbar - (I - Sigma) @ alpha2 / n)
            else:
                mu_new = xbar - (I - Sigma) @ alpha2 / n
            finite = (
                np.isfinite(a1_new)
                and np.all(np.isfinite(Sigma_new))
                and np.all(np.isfinite(a2_new))
                and np.all(np.isfinite(mu_new))
            )
            if not finite:
                raise NumericError(f"non-finite iterate at sweep {it}", trace=trace)
        except NumericError as exc:
            exc.report = best_report(str(exc))
            raise

        changes = {
            "alpha1": _rel_change(a1_new, alpha1),
            "Sigma": _rel_change(Sigma_new, Sigma),
            "alpha2": _rel_change(a2_new, alpha2),
            "mu": _rel_change(mu_new, mu),
        }
        alpha1, Sigma, alpha2, mu = a1_new, Sigma_new, a2_new, mu_new
        bad = badness(Sigma, mu)
        if config.fallback == "last" or bad < best[0]:
            best = (bad, it, alpha1, Sigma, alpha2, mu)
        if config.keep_trace:
            trace.append({"iter": it, **changes, "h_norm": float(np.linalg.norm(Sigma @ mu - mu))})
        done = tuple(k for k in SMLE_BLOCKS if changes[k] <= config.tol)
        if it == 1:
            # alpha1 repeats its seed on the first sweep by construction
            done = tuple(k for k in done if k != "alpha1")
        if len(done) >= 2:
            converged_blocks = done
            break

    return SolverReport(
        "SMLE",
        EstimatePair(mu, Sigma),
        LagrangeState(alpha1, alpha2),
        it if config.max_iter else 0,
        len(converged_blocks) >= 2,
        converged_blocks,
        trace=trace,
    )


# --- explicit scalar multiplier (mean-value parameterization) ----------------


def sc_mle(data, config: SolverConfig = SolverConfig()) -> SolverReport:
    """Double iteration with an explicit scalar Lagrange multiplier.

    ``T0`` is the observed canonical statistic. The outer loop freezes
    ``m = T`` and ``V = V(m)``; the inner loop updates::

        T <- T - V grad_h(m) h(T) / (grad_h(m)^T V grad_h(T))

    until a step is at most ``epsilon``. The outer loop ends once
    ``|T - m| <= epsilon``. Both loops are capped at ``inner_max_iter``. The
    estimate is unpacked from ``m``; positive definiteness is reported, not
    enforced.
    """
    ds = as_dataset(data)
    _check_sample(ds)
    n, p = ds.n, ds.p
    eps = config.epsilon
    cap = config.inner_max_iter
    T0 = canonical_statistic(ds)
    T = T0.copy()
    m = T.copy()
    alpha = 0.0
    trace: list[dict] = []
    converged = False
    inner_total = 0
    outer = 0
    for outer in range(1, cap + 1):
        m = T.copy()
        est_m = estimate_from_m(m)
        V = canonical_covariance(EstimatePair(est_m.mean, symmetrize(est_m.cov)), n)
        Vg = V @ grad_h_scalar(m)
        inner_steps = 0
        for _ in range(cap):
            inner_steps += 1
            hT = h_scalar(T)
            if hT == 0.0:
                alpha = 0.0
                break
            den = float(Vg @ grad_h_scalar(T))
            if abs(den) < DENOMINATOR_TOL:
                raise SingularStepError("multiplier denominator vanished", trace=trace)
            alpha = -hT / den
            T_new = T + alpha * Vg
            if not np.all(np.isfinite(T_new)):
                raise NumericError("non-finite canonical iterate", trace=trace)
            step = float(np.linalg.norm(T_new - T))
            T = T_new
            if step <= eps:
                break
        inner_total += inner_steps
        gap = float(np.linalg.norm(T - m))
        if config.keep_trace:
            trace.append({"outer": outer, "inner_steps": inner_steps, "alpha2": alpha, "h_m": h_scalar(m), "h_T": h_scalar(T), "T_minus_m": gap})
        if gap <= eps:
            converged = True
            break

    est = estimate_from_m(m)
    est = EstimatePair(est.mean, symmetrize(est.cov))
    return SolverReport(
        "SC",
        est,
        LagrangeState(0.0, float(alpha)),
        outer,
        converged,
        ("m",) if converged else (),
        trace=trace,
        extras={"h_T0": h_scalar(T0), "h_m": h_scalar(m), "inner_iterations": inner_total},
    )


# --- bordered-information iteration ------------------------------------------


def information_matrix(est: EstimatePair) -> np.ndarray:
    """``blockdiag(Sigma^{-1}, Sigma^{-1} (x) Sigma^{-1})``."""
    Si = np.linalg.inv(est.cov)
    p = est.p
    q = p + p * p
    B = np.zeros((q, q))
    B[:p, :p] = Si
    B[p:, p:] = np.kron(Si, Si)
    return B


@dataclass(frozen=True)
class BorderedInverse:
    """Blocks of the inverse of ``[[B, -H], [-H^T, 0]]``.

    ``Q`` follows the sign convention ``Q = -B^{-1} H R`` so that
    ``P = B^{-1}(I - H Q^T)``; the true inverse is ``[[P, -Q], [-Q^T, R]]``.
    """

    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    condition: float

    def inverse(self) -> np.ndarray:
        return np.block([[self.P, -self.Q], [-self.Q.T, self.R]])


def bordered_inverse(est: EstimatePair) -> BorderedInverse:
    """Closed-form inverse of the bordered information matrix at ``est``.

    Uses ``R = -[(Sigma - I) Sigma (Sigma - I) + (mu^T Sigma mu) Sigma]^{-1}``,
    which equals ``-(H^T B^{-1} H)^{-1}``.
    """
    p = est.p
    Sigma = symmetrize(est.cov)
    mu = est.mean
    I = np.eye(p)
    cond_sigma = np.linalg.cond(Sigma)
    if not np.isfinite(cond_sigma) or cond_sigma**2 > CONDITION_LIMIT:
        raise IllConditionedError(
            f"information block B is ill-conditioned (cond {cond_sigma**2:.3e})"
        )
    inner = (Sigma - I) @ Sigma @ (Sigma - I) + float(mu @ Sigma @ mu) * Sigma
    cond_inner = np.linalg.cond(inner)
    if not np.isfinite(cond_inner) or cond_inner > CONDITION_LIMIT:
        raise IllConditionedError(
            f"block (Sigma-I)Sigma(Sigma-I) + (mu'Sigma mu)Sigma is singular (cond {cond_inner:.3e})"
        )
    R = -np.linalg.inv(inner)
    R = 0.5 * (R + R.T)
    H = constraint_jacobian(EstimatePair(mu, Sigma))
    Binv_H = np.vstack([Sigma @ H[:p], np.kron(Sigma, Sigma) @ H[p:]])
    Q = -Binv_H @ R
    Binv = np.zeros((p + p * p, p + p * p))
    Binv[:p, :p] = Sigma
    Binv[p:, p:] = np.kron(Sigma, Sigma)
    P = Binv + Binv_H @ R @ Binv_H.T
    P = 0.5 * (P + P.T)
    return BorderedInverse(P, Q, R, max(cond_sigma**2, cond_inner))


def as_asymptotic_covariance(est: EstimatePair) -> tuple[np.ndarray, np.ndarray]:
    """Limit covariances ``(P, R)`` of ``sqrt(n)(theta_hat - theta)`` and ``alpha2/sqrt(n)`` (the latter is ``-R``)."""
    if not is_positive_definite(est.cov):
        raise ContractError("Sigma must be positive definite")
    blocks = bordered_inverse(est)
    return blocks.P, blocks.R


def project_to_ball(point: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Pull ``point`` back onto the sphere of ``radius`` about ``center`` if outside.

    Returns ``(1 - t) center + t point`` with ``t = radius / |center - point|``.
    """
    point = np.asarray(point, dtype=float)
    center = np.asarray(center, dtype=float)
    dist = float(np.linalg.norm(point - center))
    if dist <= radius:
        return point
    t = radius / dist
    return (1.0 - t) * center + t * point


def as_mle(data, config: SolverConfig = SolverConfig()) -> SolverReport:
    """Bordered-information (Newton-type) iteration inside a ball.

    With ``E`` the bordered matrix ``[[B, -H], [-H^T, 0]]`` evaluated once at
    ``theta0 = (xbar, vec S)`` the update is::

        [theta; a/n] += E^{-1} [score(theta)/n + H(theta) a/n; h(theta)]

    After each step the covariance block is symmetrized and the iterate is
    pulled back onto the ball of radius ``|theta0|`` about ``theta0`` if it
    left it. ``refresh_every > 0`` re-evaluates ``E`` periodically.
    """
    ds = as_dataset(data)
    _check_sample(ds)
    st = sufficient_stats(ds)
    n, p = ds.n, ds.p
    q = p + p * p
    est0 = EstimatePair(st.mean, st.scatter)
    if not is_positive_definite(st.scatter):
        raise ContractError("sample covariance is not positive definite")
    theta0 = est0.theta()
    delta = float(np.linalg.norm(theta0))
    Einv = bordered_inverse(est0).inverse()
    theta = theta0.copy()
    lam = np.zeros(p)
    trace: list[dict] = []
    converged = False
    projections = 0
    max_dist = 0.0
    it = 0
    for it in range(1, config.max_iter + 1):
        est = EstimatePair.from_theta(theta, p)
        if config.refresh_every and it > 1 and (it - 1) % config.refresh_every == 0:
            Einv = bordered_inverse(EstimatePair(est.mean, symmetrize(est.cov))).inverse()
        try:
            d_mu, d_S = score(est, ds)
        except NumericError as exc:
            raise NumericError(f"iterate {it}: {exc}", trace=trace) from exc
        g = np.concatenate([d_mu, vec(d_S)]) / n + constraint_jacobian(est) @ lam
        h = est.cov @ est.mean - est.mean
        step = Einv @ np.concatenate([g, h])
        new_theta = theta + step[:q]
        new_lam = lam + step[q:]
        Sig = symmetrize(new_theta[p:].reshape((p, p), order="F"))
        new_theta[p:] = vec(Sig)
        projected = project_to_ball(new_theta, theta0, delta)
        if projected is not new_theta:
            projections += 1
        new_theta = projected
        if not (np.all(np.isfinite(new_theta)) and np.all(np.isfinite(new_lam))):
            raise NumericError(f"non-finite iterate at step {it}", trace=trace)
        change = _rel_change(new_theta, theta)
        dist = float(np.linalg.norm(new_theta - theta0))
        max_dist = max(max_dist, dist)
        theta, lam = new_theta, new_lam
        if config.keep_trace:
            trace.append({"iter": it, "theta_change": change, "distance": dist, "h_norm": float(np.linalg.norm(h))})
        if change <= config.tol:
            converged = True
            break

    est = EstimatePair.from_theta(theta, p)
    est = EstimatePair(est.mean, symmetrize(est.cov))
    return SolverReport(
        "AS",
        est,
        LagrangeState(0.0, lam * n),
        it if config.max_iter else 0,
        converged,
        ("theta",) if converged else (),
        trace=trace,
        extras={"ball_radius": delta, "projections": projections, "max_distance": max_dist},
    )


METHODS = {"SMLE": smle, "SC": sc_mle, "AS": as_mle}


def solve(method: str, data, config: SolverConfig = SolverConfig()) -> SolverReport:
    try:
        fn = METHODS[method.upper()]
    except KeyError:
        raise ContractError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(data, config)
