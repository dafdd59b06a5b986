import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import gammaln

from mixrate.core import GroupObservations, ObservationCell, PortfolioDataset
from mixrate.gamma_mix import (
    GammaPrior,
    em_fit_independent_gamma,
    loglik_independent_gamma,
    posterior_gamma,
)
from mixrate.glm import fit_standard

from conftest import make_cell, poisson_panel, single_group_dataset


def quad_loglik_one_characteristic(cells, beta, psi):
    """Numerical integral of the mixed Poisson density over the Gamma prior."""
    alpha = 1.0 / psi
    e = np.array([c.exposure * np.exp(c.covariates @ np.asarray(beta)) for c in cells])
    y = np.array([c.count for c in cells])

    def log_f(theta):
        log_pois = np.sum(y * np.log(theta * e) - gammaln(y + 1) - theta * e)
        return log_pois + stats.gamma.logpdf(theta, alpha, scale=psi)

    # Normalize by the peak so quad sees an O(1) integrand.
    grid = np.linspace(1e-3, 10.0, 2000)
    log_peak = max(log_f(t) for t in grid)
    # Finite upper limit: the integrand decays at least like exp(-theta) here,
    # so truncation at 80 is far below the quadrature error.
    val, err = integrate.quad(
        lambda t: np.exp(log_f(t) - log_peak), 0, 80.0,
        limit=500, epsabs=1e-13, epsrel=1e-13,
    )
    assert err < 1e-10 * val
    return log_peak + np.log(val)


class TestLoglik:
    def test_geometric_half_at_zero(self):
        ds = single_group_dataset([make_cell(1.0, 0)])
        ll = loglik_independent_gamma(ds, {"ai": [0.0], "ia": [0.0]}, GammaPrior(1.0, 1.0))
        assert ll == pytest.approx(np.log(0.5), abs=1e-12)

    def test_geometric_half_at_one(self):
        ds = single_group_dataset([make_cell(1.0, 1)])
        ll = loglik_independent_gamma(ds, {"ai": [0.0], "ia": [0.0]}, GammaPrior(1.0, 1.0))
        assert ll == pytest.approx(np.log(0.25), abs=1e-12)

    def test_degenerate_prior_recovers_poisson(self):
        cells = [make_cell(2.0, 1), make_cell(3.0, 4)]
        ds = single_group_dataset(cells)
        betas = {"ai": [0.1], "ia": [0.0]}
        ll_mixed = loglik_independent_gamma(ds, betas, GammaPrior(1e-8, 1e-8))
        e = np.array([c.exposure * np.exp(0.1) for c in cells])
        y = np.array([c.count for c in cells])
        ll_pois = float(np.sum(y * np.log(e) - e - gammaln(y + 1)))
        assert ll_mixed == pytest.approx(ll_pois, abs=1e-4)

    def test_matches_numerical_integration(self):
        # d=1 margin instances against direct quadrature of the joint density.
        rng = np.random.default_rng(11)
        for _ in range(5):
            cells = [
                make_cell(rng.uniform(0.5, 4.0), int(rng.integers(0, 6)))
                for _ in range(rng.integers(1, 4))
            ]
            psi = float(rng.uniform(0.2, 2.0))
            beta = [float(rng.normal(scale=0.3))]
            ds = single_group_dataset(cells)
            ll = loglik_independent_gamma(ds, {"ai": beta, "ia": [0.0]}, GammaPrior(psi, 1.0))
            oracle = quad_loglik_one_characteristic(cells, beta, psi)
            assert ll == pytest.approx(oracle, abs=1e-8)


class TestPosterior:
    def test_no_data_returns_prior(self):
        shape, rate = posterior_gamma(0, 0.0, 0.7)
        assert shape == rate == pytest.approx(1.0 / 0.7)
        assert shape / rate == pytest.approx(1.0)

    def test_balanced_data(self):
        shape, rate = posterior_gamma(5, 5.0, 1.0)
        assert (shape, rate) == (6.0, 6.0)

    def test_shrinks_between_raw_and_prior(self):
        shape, rate = posterior_gamma(10, 2.0, 0.5)
        assert (shape, rate) == (12.0, 4.0)
        mean = shape / rate
        assert mean == pytest.approx(3.0)
        assert 1.0 < mean < 10.0 / 2.0

    def test_convex_combination_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            y = int(rng.integers(1, 30))
            e = float(rng.uniform(0.1, 20.0))
            g = float(rng.uniform(0.05, 5.0))
            shape, rate = posterior_gamma(y, e, g)
            mean = shape / rate
            w = e / (e + 1.0 / g)
            assert mean == pytest.approx(w * (y / e) + (1 - w) * 1.0, abs=1e-12)


class TestEMFit:
    def test_homogeneous_data_drives_psi_down(self):
        rng = np.random.default_rng(42)
        effects = np.ones((150, 2))
        ds = poisson_panel(rng, effects, exposures=500.0)
        fit = em_fit_independent_gamma(ds)
        assert fit.prior.psi_ai < 0.05
        assert fit.prior.psi_ia < 0.05

    def test_single_group_shrinkage_interval(self):
        ds = single_group_dataset([make_cell(10.0, 7)], [make_cell(5.0, 1)])
        fit = em_fit_independent_gamma(ds)
        t_ai, t_ia = fit.group_posteriors["G1"]
        e_ai = 10.0 * np.exp(fit.betas["ai"][0])
        e_ia = 5.0 * np.exp(fit.betas["ia"][0])
        lo_ai, hi_ai = sorted([7.0 / e_ai, 1.0])
        lo_ia, hi_ia = sorted([1.0 / e_ia, 1.0])
        assert lo_ai - 1e-12 <= t_ai <= hi_ai + 1e-12
        assert lo_ia - 1e-12 <= t_ia <= hi_ia + 1e-12

    def test_loglik_trace_nondecreasing(self):
        rng = np.random.default_rng(9)
        effects = rng.gamma(10 / 3, 3 / 10, size=(40, 2))
        ds = poisson_panel(rng, effects, exposures=rng.uniform(5, 400, size=(40, 2)))
        fit = em_fit_independent_gamma(ds, max_iter=200)
        trace = np.asarray(fit.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-8 * (1.0 + np.abs(trace[:-1])))

    def test_recovers_prior_variance(self):
        rng = np.random.default_rng(7)
        psi_true = 0.3
        effects = rng.gamma(1 / psi_true, psi_true, size=(400, 2))
        ds = poisson_panel(rng, effects, exposures=300.0)
        fit = em_fit_independent_gamma(ds)
        assert fit.prior.psi_ai == pytest.approx(psi_true, rel=0.35)
        assert fit.prior.psi_ia == pytest.approx(psi_true, rel=0.35)
        assert fit.loglik >= fit_standard(ds).loglik

    def test_zero_exposure_group_gets_prior_mean(self):
        groups = [
            GroupObservations(
                "G1",
                {
                    "ai": [ObservationCell(50.0, 9, np.array([1.0]))],
                    "ia": [ObservationCell(30.0, 4, np.array([1.0]))],
                },
            ),
            GroupObservations(
                "G2",
                {"ai": [ObservationCell(60.0, 2, np.array([1.0]))], "ia": []},
            ),
        ]
        ds = PortfolioDataset(groups=tuple(groups), grid=np.array([0.0, 1.0]))
        fit = em_fit_independent_gamma(ds)
        assert fit.group_posteriors["G2"][1] == pytest.approx(1.0, abs=1e-12)
