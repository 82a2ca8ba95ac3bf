import numpy as np
import pytest

from conftest import random_spd
from constrained_mvn.enforce import modify_m1
from constrained_mvn.errors import (
    ContractError,
    DivergenceError,
    DomainError,
    IllConditionedError,
    NumericError,
)
from constrained_mvn.harness import generate_truth, sample_dataset
from constrained_mvn.likelihood import (
    EstimatePair,
    canonical_statistic,
    constraint_jacobian,
    constraint_residuals,
    h_scalar,
    sufficient_stats,
)
from constrained_mvn.solvers import (
    SolverConfig,
    as_asymptotic_covariance,
    as_mle,
    bordered_inverse,
    information_matrix,
    intermediate_mle,
    project_to_ball,
    sc_mle,
    shape_mle,
    smle,
    solve,
)


def gaussian_sample(rng, n, p):
    return rng.standard_normal((n, p)) @ np.linalg.cholesky(random_spd(rng, p)).T + rng.standard_normal(p)


def sample_with_moments(rng, n, mean, cov):
    """Rows whose sample mean and divide-by-n covariance equal ``mean`` and ``cov`` exactly."""
    Z = rng.standard_normal((n, mean.size))
    Z -= Z.mean(axis=0)
    L = np.linalg.cholesky(Z.T @ Z / n)
    Z = Z @ np.linalg.inv(L).T
    return Z @ np.linalg.cholesky(cov).T + mean


def smle_outcome(data, config=SolverConfig()):
    try:
        return smle(data, config), None
    except NumericError as exc:
        return exc.report, exc


class TestShapeMLE:
    def test_identity_scatter(self, rng):
        X = sample_with_moments(rng, 40, np.array([1.0, -2.0, 0.5]), np.eye(3))
        rep = shape_mle(X)
        np.testing.assert_allclose(rep.estimate.cov, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(rep.estimate.mean, [1.0, -2.0, 0.5], atol=1e-12)
        assert rep.converged

    def test_determinant_oracle(self, rng):
        X = gaussian_sample(rng, 50, 5)
        rep = shape_mle(X)
        D = X - X.mean(axis=0)
        A = D.T @ D
        np.testing.assert_allclose(rep.estimate.cov, A / np.linalg.det(A) ** 0.2, rtol=1e-10)
        assert np.linalg.det(rep.estimate.cov) == pytest.approx(1.0, abs=1e-10)

    def test_rank_deficient(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        with pytest.raises(DomainError):
            shape_mle(X)


class TestIntermediate:
    def test_fixed_point_self_consistency(self, rng):
        cfg = SolverConfig()
        converged = 0
        for _ in range(10):
            X = gaussian_sample(rng, 50, 3)
            xbar = X.mean(axis=0)
            try:
                rep = intermediate_mle(X, xbar / np.linalg.norm(xbar), cfg, variant="derived")
            except NumericError:
                continue
            if rep.converged:
                converged += 1
                a = rep.multipliers.alpha2
                assert rep.extras["fixed_point_gap"] <= cfg.tol * (1 + np.linalg.norm(a))
        assert converged > 0

    def test_stationarity_at_limit(self, rng):
        converged = 0
        for _ in range(10):
            X = gaussian_sample(rng, 60, 3)
            xbar = X.mean(axis=0)
            b = xbar / np.linalg.norm(xbar)
            try:
                rep = intermediate_mle(X, b, SolverConfig(tol=1e-12), variant="derived")
            except NumericError:
                continue
            if not rep.converged:
                continue
            converged += 1
            S, mu = rep.estimate.cov, rep.estimate.mean
            np.testing.assert_allclose(S @ b, mu, atol=1e-8)
            assert np.linalg.det(S) == pytest.approx(1.0, abs=1e-10)
        assert converged > 0

    def test_scalar_bisection_oracle(self, rng):
        n, b = 40, 0.7
        x = rng.normal(1.1, 0.8, size=n)

        def residual(a):
            # p = 1 stationarity: U(a) b - |U(a)| mu(a) with U(a) = sum (x - mu)^2 + 2 a mu
            mu = x.mean() - a / n
            U = np.sum((x - mu) ** 2) + 2 * a * mu
            return U * b - abs(U) * mu

        lo, hi = n * (x.mean() - b) - 5.0, n * (x.mean() - b) + 5.0
        assert residual(lo) * residual(hi) < 0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if residual(lo) * residual(mid) <= 0:
                hi = mid
            else:
                lo = mid
        rep = intermediate_mle(x[:, None], np.array([b]), SolverConfig(tol=1e-12), variant="derived")
        assert rep.multipliers.alpha2[0] == pytest.approx(0.5 * (lo + hi), abs=1e-6)
        assert rep.estimate.cov[0, 0] == pytest.approx(1.0)
        assert rep.estimate.mean[0] == pytest.approx(b, abs=1e-6)

    @pytest.mark.parametrize("variant", ["printed", "derived"])
    def test_residual_trace(self, rng, variant):
        X = gaussian_sample(rng, 50, 3)
        xbar = X.mean(axis=0)
        try:
            rep = intermediate_mle(X, xbar / np.linalg.norm(xbar), SolverConfig(), variant=variant)
        except NumericError as exc:
            assert exc.trace is not None
            return
        res = [t["intermediate_residual"] for t in rep.trace]
        if rep.converged:
            assert np.all(np.diff(res[-10:]) <= 0)

    def test_printed_variant_diverges(self, rng):
        X = gaussian_sample(rng, 50, 3)
        with pytest.raises(DivergenceError):
            intermediate_mle(X, np.ones(3) / np.sqrt(3), variant="printed")

    def test_bad_inputs(self, rng):
        X = gaussian_sample(rng, 20, 3)
        with pytest.raises(DomainError):
            intermediate_mle(X, np.zeros(3))
        with pytest.raises(ContractError):
            intermediate_mle(X, np.ones(3), variant="other")


class TestSMLE:
    def test_zero_iterations_returns_start(self, rng):
        X = gaussian_sample(rng, 30, 3)
        rep = smle(X, SolverConfig(max_iter=0))
        st = sufficient_stats(X)
        np.testing.assert_array_equal(rep.estimate.cov, st.scatter)
        np.testing.assert_array_equal(rep.estimate.mean, st.mean)
        np.testing.assert_array_equal(rep.multipliers.alpha2, st.mean)
        assert rep.iterations_used == 0

    def test_alpha1_identity(self, rng):
        X = gaussian_sample(rng, 40, 3)
        n, p = X.shape
        rep, _ = smle_outcome(X, SolverConfig(max_iter=1))
        xbar = X.mean(axis=0)
        D = X - xbar
        U = D.T @ D + 2 * np.outer(xbar, xbar)
        assert n + 2 * rep.multipliers.alpha1 == pytest.approx(np.linalg.det(U) ** (1 / p), rel=1e-12)
        # alpha1 seeds with its own first update, so the first Sigma has unit determinant
        if rep.iterations_used == 1:
            assert np.linalg.det(rep.estimate.cov) == pytest.approx(1.0, rel=1e-10)

    def test_residuals_recomputed(self, rng):
        rep, _ = smle_outcome(gaussian_sample(rng, 40, 3))
        ref = constraint_residuals(rep.estimate)
        assert rep.residuals.h_norm == ref.h_norm
        assert rep.residuals.det_gap == ref.det_gap

    def test_failure_carries_best_iterate(self, rng):
        for _ in range(10):
            X = gaussian_sample(rng, 50, 5)
            st = sufficient_stats(X)
            init = np.linalg.norm(st.scatter @ st.mean - st.mean)
            rep, exc = smle_outcome(X)
            if exc is not None:
                assert isinstance(exc, NumericError)
                assert not rep.converged
                assert "failure" in rep.extras
                assert rep.residuals.h_norm <= init

    def test_deterministic(self, rng):
        X = gaussian_sample(rng, 50, 4)
        a, _ = smle_outcome(X)
        b, _ = smle_outcome(X)
        np.testing.assert_array_equal(a.estimate.cov, b.estimate.cov)
        np.testing.assert_array_equal(a.estimate.mean, b.estimate.mean)

    @pytest.mark.parametrize("seed", range(5))
    def test_reduces_residual_large_n(self, seed):
        truth = generate_truth(3, np.random.SeedSequence([99, seed]))
        data = sample_dataset(truth, 10000, np.random.SeedSequence([98, seed]))
        st = sufficient_stats(data)
        init = np.linalg.norm(st.scatter @ st.mean - st.mean)
        rep, _ = smle_outcome(data)
        assert rep.residuals.h_norm < init

    def test_bad_config(self):
        with pytest.raises(ContractError):
            SolverConfig(fallback="first")
        with pytest.raises(ContractError):
            SolverConfig(tol=0)


class TestSC:
    def test_fixed_point_when_constraint_holds(self, rng):
        pre = EstimatePair(np.array([0.8, -0.3, 0.5]), random_spd(rng, 3))
        truth = modify_m1(pre).estimate
        X = sample_with_moments(rng, 50, truth.mean, truth.cov)
        T0 = canonical_statistic(X)
        assert abs(h_scalar(T0)) < 1e-12
        rep = sc_mle(X)
        assert abs(rep.multipliers.alpha2) < 1e-12
        np.testing.assert_allclose(rep.estimate.mean, truth.mean, atol=1e-10)
        np.testing.assert_allclose(rep.estimate.cov, truth.cov, atol=1e-10)

    def test_reduces_constraint_violation(self, rng):
        for _ in range(10):
            rep = sc_mle(gaussian_sample(rng, 50, 3))
            assert abs(rep.extras["h_m"]) <= abs(rep.extras["h_T0"])

    def test_reports_without_forcing_pd(self, rng):
        rep = sc_mle(gaussian_sample(rng, 50, 5))
        assert rep.pd_flag == bool(np.linalg.eigvalsh(rep.estimate.cov)[0] > 0)

    def test_n_not_above_p(self, rng):
        with pytest.raises(DomainError):
            sc_mle(rng.standard_normal((3, 3)))


class TestAS:
    def test_ball_projection_example(self):
        c = project_to_ball(np.array([2.0, 0, 0]), np.zeros(3), 1.0)
        np.testing.assert_allclose(c, [1.0, 0, 0])

    def test_ball_projection_inside_untouched(self):
        x = np.array([0.3, 0.1])
        assert project_to_ball(x, np.zeros(2), 1.0) is x

    def test_R_closed_form_vs_generic(self, rng):
        for _ in range(20):
            p = int(rng.integers(2, 5))
            est = EstimatePair(rng.standard_normal(p), random_spd(rng, p))
            B = information_matrix(est)
            H = constraint_jacobian(est)
            R_generic = -np.linalg.inv(H.T @ np.linalg.solve(B, H))
            np.testing.assert_allclose(bordered_inverse(est).R, R_generic, rtol=1e-8, atol=1e-10)

    def test_R_identity_sigma(self):
        mu = np.array([1.0, 2.0, -2.0])
        _, R = as_asymptotic_covariance(EstimatePair(mu, np.eye(3)))
        np.testing.assert_allclose(R, -np.eye(3) / 9.0, atol=1e-14)

    def test_R_diag_example(self):
        d = 2.5
        est = EstimatePair(np.array([1.0, 0, 0]), np.diag([1.0, d, 1 / d]))
        B = information_matrix(est)
        H = constraint_jacobian(est)
        E = np.block([[B, -H], [-H.T, np.zeros((3, 3))]])
        oracle = np.linalg.inv(E)
        blocks = bordered_inverse(est)
        np.testing.assert_allclose(blocks.R, oracle[-3:, -3:], atol=1e-10)
        np.testing.assert_allclose(blocks.inverse(), oracle, atol=1e-10)

    def test_P_identity(self, rng):
        est = EstimatePair(rng.standard_normal(3), random_spd(rng, 3))
        blocks = bordered_inverse(est)
        B = information_matrix(est)
        H = constraint_jacobian(est)
        np.testing.assert_allclose(B @ blocks.P + H @ blocks.Q.T, np.eye(12), atol=1e-8)

    def test_negative_R_is_pd(self, rng):
        est = EstimatePair(rng.standard_normal(4), random_spd(rng, 4))
        _, R = as_asymptotic_covariance(est)
        assert np.linalg.eigvalsh(-R)[0] > 0

    def test_ill_conditioned(self):
        est = EstimatePair(np.ones(2), np.diag([1e8, 1e-8]))
        with pytest.raises(IllConditionedError):
            bordered_inverse(est)

    def test_stays_in_ball(self, rng):
        rep = as_mle(gaussian_sample(rng, 30, 3), SolverConfig(max_iter=200))
        radius = rep.extras["ball_radius"]
        assert max(t["distance"] for t in rep.trace) <= radius * (1 + 1e-12)
        assert rep.extras["max_distance"] <= radius * (1 + 1e-12)

    def test_deterministic(self, rng):
        X = gaussian_sample(rng, 30, 3)
        a = as_mle(X, SolverConfig(max_iter=50))
        b = as_mle(X, SolverConfig(max_iter=50))
        np.testing.assert_array_equal(a.estimate.cov, b.estimate.cov)


def test_solve_dispatch(rng):
    X = gaussian_sample(rng, 30, 3)
    assert solve("sc", X).method == "SC"
    with pytest.raises(ContractError):
        solve("newton", X)
