import numpy as np
import pytest
from numpy.polynomial import polynomial as P
from scipy import integrate
from scipy.special import gammaln

from mixrate.core import GroupObservations, ObservationCell, PortfolioDataset
from mixrate.hier_mix import (
    HierPrior,
    ecm_fit_hier,
    estep_hier,
    gamma_ratio_coefficients,
    mixture_rate,
    occupancy_vector,
    polynomial_coefficients,
    posterior_theta0,
    sample_hier_prior,
)

from conftest import poisson_panel


def brute_force_poly(o):
    """Exact integer expansion of prod_s (theta + s)^{o_s}."""
    coeffs = np.array([1.0])
    for s, count in enumerate(o):
        for _ in range(int(count)):
            coeffs = P.polymul(coeffs, np.array([float(s), 1.0]))
    return coeffs


def unnormalized_posterior(theta, y, e, prior):
    """Directly assembled density kernel of Theta_0 | Y = y."""
    y = np.asarray(y, dtype=float)
    e = np.asarray(e, dtype=float)
    out = theta ** (prior.eta - 1.0) * np.exp(-prior.nu * theta)
    for yj, ej in zip(y, e):
        out *= np.exp(gammaln(theta + yj) - gammaln(theta))
        out *= (1.0 + (prior.nu / prior.eta) * ej) ** (-theta)
    return out


class TestOccupancy:
    def test_all_zero(self):
        np.testing.assert_array_equal(occupancy_vector([0, 0]), [0, 0])

    def test_one_zero(self):
        np.testing.assert_array_equal(occupancy_vector([1, 0]), [1, 0])

    def test_two_one(self):
        np.testing.assert_array_equal(occupancy_vector([2, 1]), [2, 1])

    def test_r_clause(self):
        o = occupancy_vector([5, 2])
        assert len(o) == 5  # r = max(5-1, 1) = 4
        np.testing.assert_array_equal(o, [2, 2, 1, 1, 1])


class TestPolynomialCoefficients:
    def test_empty_product(self):
        log_a = polynomial_coefficients([0, 0])
        np.testing.assert_array_equal(log_a, [0.0])

    def test_pure_theta(self):
        log_a = polynomial_coefficients([1, 0])
        assert log_a[0] == -np.inf
        assert log_a[1] == 0.0

    def test_theta_squared_times_theta_plus_one(self):
        log_a = polynomial_coefficients([2, 1])
        np.testing.assert_allclose(np.exp(log_a), [0.0, 0.0, 1.0, 1.0], atol=1e-300)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            y = rng.integers(0, 7, size=2)
            o = occupancy_vector(y)
            log_a = polynomial_coefficients(o)
            exact = brute_force_poly(o)
            with np.errstate(divide="ignore"):
                expected = np.log(exact)
            np.testing.assert_allclose(log_a, expected, atol=1e-10)

    def test_evaluation_at_one(self):
        # prod_s (1+s)^{o_s} must equal sum_m a_m.
        for y in ([3, 2], [0, 4], [6, 6]):
            o = occupancy_vector(y)
            log_a = polynomial_coefficients(o)
            lhs = float(np.sum(o * np.log(np.arange(1, len(o) + 1))))
            finite = log_a[np.isfinite(log_a)]
            m = finite.max()
            rhs = m + np.log(np.sum(np.exp(finite - m)))
            assert rhs == pytest.approx(lhs, abs=1e-10)


class TestGammaRatioCoefficients:
    def test_b0_is_one(self):
        log_b = gamma_ratio_coefficients(1.7, 0.9, [2.0, 3.0], 4)
        assert log_b[0] == 0.0

    def test_hand_recurrence_step(self):
        # denominator = sum log1p((nu/eta) e) + nu = 4 with e = 0 and nu = 4.
        log_b = gamma_ratio_coefficients(2.0, 4.0, [0.0, 0.0], 1)
        assert np.exp(log_b[1]) == pytest.approx((1.0 + 2.0 - 1.0) / 4.0)

    def test_recurrence_matches_closed_form(self):
        eta, nu = 1.3, 2.1
        e = [4.0, 0.5]
        denom = mixture_rate(eta, nu, e)
        log_b = gamma_ratio_coefficients(eta, nu, e, 40)
        b = 1.0
        for m in range(1, 41):
            b = b * (m + eta - 1.0) / denom
            assert np.log(b) == pytest.approx(log_b[m], abs=1e-10)


class TestPosterior:
    def test_no_counts_single_component(self):
        prior = HierPrior(1.5, 0.8)
        post = posterior_theta0([0, 0], [2.0, 1.0], prior)
        assert len(post.ms) == 1
        assert post.ms[0] == 0
        assert post.log_weights[0] == pytest.approx(0.0)
        assert post.shapes[0] == pytest.approx(1.5)

    def test_single_count_single_component(self):
        prior = HierPrior(1.5, 0.8)
        post = posterior_theta0([1, 0], [2.0, 1.0], prior)
        assert list(post.ms) == [1]
        assert post.shapes[0] == pytest.approx(2.5)

    def test_two_one_components(self):
        prior = HierPrior(1.0, 1.0)
        e = [1.0, 2.0]
        post = posterior_theta0([2, 1], e, prior)
        assert list(post.ms) == [2, 3]
        log_b = gamma_ratio_coefficients(prior.eta, prior.nu, e, 3)
        expected = np.exp(log_b[2:4]) / np.exp(log_b[2:4]).sum()
        np.testing.assert_allclose(np.exp(post.log_weights), expected, rtol=1e-12)

    def test_density_matches_quadrature(self):
        prior = HierPrior(1.2, 0.7)
        y, e = [3, 1], [2.5, 0.8]
        post = posterior_theta0(y, e, prior)
        norm, err = integrate.quad(
            lambda t: unnormalized_posterior(t, y, e, prior), 0, 60,
            limit=400, epsabs=1e-12, epsrel=1e-12,
        )
        for theta in (0.3, 0.9, 1.8, 4.0):
            direct = unnormalized_posterior(theta, y, e, prior) / norm
            assert post.pdf(theta)[0] == pytest.approx(direct, rel=1e-6)

    def test_mixture_integrates_to_one(self):
        prior = HierPrior(2.0, 1.5)
        post = posterior_theta0([4, 2], [3.0, 1.0], prior)
        assert np.exp(post.log_weights).sum() == pytest.approx(1.0, abs=1e-12)
        val, _ = integrate.quad(lambda t: post.pdf(t)[0], 0, 80, limit=400)
        assert val == pytest.approx(1.0, abs=1e-6)


class TestEStep:
    def test_no_data(self):
        prior = HierPrior(1.4, 0.6)
        e0, elog0, ej = estep_hier([0, 0], [0.0, 0.0], prior)
        assert e0 == pytest.approx(prior.eta / prior.nu)
        np.testing.assert_allclose(ej, [1.0, 1.0], rtol=1e-12)

    def test_single_count_mean(self):
        prior = HierPrior(1.4, 0.6)
        e = [2.0, 1.0]
        e0, _, _ = estep_hier([1, 0], e, prior)
        assert e0 == pytest.approx((1 + prior.eta) / mixture_rate(prior.eta, prior.nu, e))

    def test_matches_quadrature(self):
        prior = HierPrior(0.9, 1.3)
        y, e = [5, 2], [4.0, 1.5]
        e0, elog0, ej = estep_hier(y, e, prior)
        kw = dict(limit=400, epsabs=1e-12, epsrel=1e-12)
        norm, _ = integrate.quad(lambda t: unnormalized_posterior(t, y, e, prior), 0, 80, **kw)
        m1, _ = integrate.quad(lambda t: t * unnormalized_posterior(t, y, e, prior), 0, 80, **kw)
        mlog, _ = integrate.quad(
            lambda t: np.log(t) * unnormalized_posterior(t, y, e, prior), 0, 80, **kw
        )
        assert e0 == pytest.approx(m1 / norm, rel=1e-6)
        assert elog0 == pytest.approx(mlog / norm, rel=1e-6)
        np.testing.assert_allclose(
            ej, (np.array(y, dtype=float) + m1 / norm) / (np.array(e) + prior.delta), rtol=1e-6
        )

    def test_posterior_mean_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            prior = HierPrior(float(rng.uniform(0.3, 4)), float(rng.uniform(0.3, 4)))
            y = rng.integers(0, 12, size=2)
            e = rng.uniform(0.0, 8.0, size=2)
            e0, _, ej = estep_hier(y, e, prior)
            lhs = float(y.sum()) + 2.0 * e0
            rhs = float(np.sum((e + prior.delta) * ej))
            assert lhs == pytest.approx(rhs, abs=1e-10 * (1 + abs(lhs)))


class TestPriorMoments:
    def test_sampled_variance_and_correlation(self):
        prior = HierPrior(2.2, 1.4)
        rng = np.random.default_rng(7)
        n = 1_000_000
        draws = sample_hier_prior(prior, n, rng)
        assert draws.shape == (n, 2)
        np.testing.assert_allclose(draws.mean(axis=0), [1.0, 1.0], atol=4 / np.sqrt(n) * 2)
        var_target = prior.variance
        corr_target = prior.correlation
        var_hat = draws.var(axis=0, ddof=1)
        # s.e. of the sample variance via the fourth moment.
        for j in range(2):
            m4 = np.mean((draws[:, j] - draws[:, j].mean()) ** 4)
            se = np.sqrt((m4 - var_hat[j] ** 2) / n)
            assert abs(var_hat[j] - var_target) < 3 * se
        corr_hat = np.corrcoef(draws.T)[0, 1]
        se_corr = (1 - corr_hat**2) / np.sqrt(n)
        assert abs(corr_hat - corr_target) < 3 * se_corr


class TestECM:
    def test_trace_nondecreasing(self):
        rng = np.random.default_rng(21)
        prior = HierPrior(2.0, 1.0)
        effects = sample_hier_prior(prior, 60, rng)
        ds = poisson_panel(rng, effects, exposures=rng.uniform(10, 200, size=(60, 2)))
        fit = ecm_fit_hier(ds, max_iter=300)
        trace = np.asarray(fit.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-8 * (1.0 + np.abs(trace[:-1])))

    def test_near_independent_effects_give_small_correlation(self):
        rng = np.random.default_rng(4)
        prior = HierPrior(40.0, 40.0)  # Corr = 1/41, Var ~ 1
        effects = sample_hier_prior(prior, 400, rng)
        ds = poisson_panel(rng, effects, exposures=2000.0)
        fit = ecm_fit_hier(ds, max_iter=350)
        assert fit.prior.correlation < 0.1

    def test_recovers_nu_across_seeds(self):
        # True nu = 1 (Corr 0.5); the average estimate over seeds stays within 30%.
        errors = []
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            effects = sample_hier_prior(HierPrior(1.0, 1.0), 300, rng)
            ds = poisson_panel(rng, effects, exposures=400.0)
            fit = ecm_fit_hier(ds, max_iter=400)
            errors.append(fit.prior.nu)
        assert np.mean(errors) == pytest.approx(1.0, rel=0.3)
