import numpy as np
import pytest

from mixrate.core import GroupObservations, ObservationCell, PortfolioDataset, covariate_row
from mixrate.glm import (
    SingularFitError,
    fit_fixed_effects,
    fit_poisson,
    fit_poisson_arrays,
    fit_standard,
    poisson_loglik,
)

from conftest import make_cell


class TestFitPoisson:
    def test_single_cell_log_count(self):
        res = fit_poisson([make_cell(1.0, 3)], offsets=[1.0])
        assert res.beta[0] == pytest.approx(np.log(3.0), abs=1e-10)

    def test_rate_one(self):
        res = fit_poisson([make_cell(2.0, 2)], offsets=[2.0])
        assert res.beta[0] == pytest.approx(0.0, abs=1e-10)

    def test_intercept_is_log_ratio(self):
        cells = [make_cell(1.0, 2), make_cell(1.0, 4)]
        res = fit_poisson(cells, offsets=[1.0, 1.0])
        assert res.beta[0] == pytest.approx(np.log(3.0), abs=1e-10)

    def test_gradient_norm_at_optimum(self):
        rng = np.random.default_rng(3)
        X = np.column_stack([np.ones(40), rng.normal(size=40)])
        off = rng.uniform(0.5, 2.0, size=40)
        y = rng.poisson(off * np.exp(0.2 + 0.5 * X[:, 1]))
        res = fit_poisson_arrays(X, y, off)
        mu = off * np.exp(X @ res.beta)
        grad = X.T @ (y - mu)
        assert np.max(np.abs(grad)) <= 1e-10 * (1.0 + abs(res.loglik))

    def test_shift_invariance_of_fitted_rates(self):
        # Reparameterizing t -> t - c must leave fitted rates unchanged.
        rng = np.random.default_rng(5)
        t = np.linspace(20, 67, 48)
        X = np.column_stack([np.ones_like(t), t, t**2])
        off = rng.uniform(1.0, 30.0, size=len(t))
        y = rng.poisson(off * np.exp(-4.5 - 0.018 * t + 0.00064 * t**2))
        res = fit_poisson_arrays(X, y, off)
        c = 40.0
        Xs = np.column_stack([np.ones_like(t), t - c, (t - c) ** 2])
        res_s = fit_poisson_arrays(Xs, y, off)
        np.testing.assert_allclose(
            np.exp(X @ res.beta), np.exp(Xs @ res_s.beta), rtol=1e-8
        )

    def test_degenerate_all_zero_counts(self):
        res = fit_poisson([make_cell(1.0, 0), make_cell(3.0, 0)], offsets=[1.0, 3.0])
        assert res.degenerate
        assert res.beta[0] == -np.inf

    def test_singular_design_raises(self):
        X = np.column_stack([np.ones(5), np.ones(5)])
        with pytest.raises(SingularFitError):
            fit_poisson_arrays(X, np.array([2, 2, 1, 0, 1]), np.ones(5))

    def test_positive_count_zero_offset_raises(self):
        with pytest.raises(SingularFitError):
            fit_poisson_arrays(np.ones((1, 1)), np.array([2.0]), np.array([0.0]))


class TestPoissonLoglik:
    def test_poisson_one_at_zero(self):
        assert poisson_loglik([make_cell(1.0, 0)], [1.0], [0.0]) == pytest.approx(-1.0)

    def test_poisson_one_at_one(self):
        assert poisson_loglik([make_cell(1.0, 1)], [1.0], [0.0]) == pytest.approx(-1.0)

    def test_poisson_one_at_two(self):
        expected = -1.0 - np.log(2.0)
        assert poisson_loglik([make_cell(1.0, 2)], [1.0], [0.0]) == pytest.approx(expected)


def _two_group_dataset():
    def cells(char, expo_counts):
        deg = 1
        return [
            ObservationCell(e, y, covariate_row(deg, t))
            for t, (e, y) in enumerate(expo_counts, start=1)
        ]

    g1 = GroupObservations(
        "G1",
        {
            "ai": cells("ai", [(10.0, 4), (12.0, 3), (9.0, 2)]),
            "ia": cells("ia", [(5.0, 2), (4.0, 1), (6.0, 2)]),
        },
    )
    g2 = GroupObservations(
        "G2",
        {
            "ai": cells("ai", [(20.0, 0), (15.0, 0), (18.0, 0)]),
            "ia": cells("ia", [(8.0, 3), (7.0, 2), (9.0, 1)]),
        },
    )
    return PortfolioDataset(groups=(g1, g2), grid=np.array([0.0, 1.0, 2.0, 3.0]))


class TestPortfolioModels:
    def test_standard_effects_are_one(self):
        fit = fit_standard(_two_group_dataset())
        assert fit.model == "standard"
        assert all(v == (1.0, 1.0) for v in fit.group_posteriors.values())
        assert np.isfinite(fit.loglik)

    def test_fixed_zero_count_group_gets_zero_effect(self):
        fit = fit_fixed_effects(_two_group_dataset())
        assert fit.group_posteriors["G2"][0] == 0.0
        assert fit.group_posteriors["G1"][0] > 0.0

    def test_fixed_effects_match_profile_solution(self):
        # The per-group dummy score equation forces theta_g = y_g / e_g(beta)
        # at the fitted beta.
        ds = _two_group_dataset()
        fit = fit_fixed_effects(ds)
        beta = fit.betas["ia"]
        for gid, group in zip(("G1", "G2"), ds.groups):
            e = sum(c.exposure * np.exp(c.covariates @ beta) for c in group.cells["ia"])
            y = sum(c.count for c in group.cells["ia"])
            assert fit.group_posteriors[gid][1] == pytest.approx(y / e, rel=1e-8)

    def test_fixed_beats_standard_loglik(self):
        ds = _two_group_dataset()
        assert fit_fixed_effects(ds).loglik >= fit_standard(ds).loglik - 1e-10
