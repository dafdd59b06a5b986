import io

import numpy as np
import pytest

from mixrate.core import (
    ConfigurationError,
    DataError,
    GroupObservations,
    ObservationCell,
    PortfolioDataset,
    RateBasis,
    covariate_row,
    evaluate_rate,
    read_panel_csv,
    weighted_exposure_sums,
    write_panel_csv,
)

from conftest import make_cell, single_group_dataset


class TestEvaluateRate:
    def test_zero_exponent(self):
        basis = RateBasis(0, np.array([0.0]))
        assert evaluate_rate(basis, 5.0) == 1.0

    def test_recovery_rate_at_zero(self):
        basis = RateBasis(1, np.array([0.3, -0.049]))
        assert evaluate_rate(basis, 0.0) == pytest.approx(np.exp(0.3), rel=1e-15)

    def test_disability_rate_at_forty(self):
        basis = RateBasis(2, np.array([-4.5, -0.018, 0.00064]))
        expected = np.exp(-4.5 - 0.72 + 1.024)  # -0.018*40, 0.00064*1600
        assert evaluate_rate(basis, 40.0) == pytest.approx(expected, rel=1e-14)

    def test_log_linear_in_coefficients(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            deg = rng.integers(0, 4)
            beta = rng.normal(size=deg + 1)
            t = rng.uniform(-3, 3)
            basis = RateBasis(int(deg), beta)
            poly = sum(b * t**m for m, b in enumerate(beta))
            assert np.log(evaluate_rate(basis, t)) == pytest.approx(poly, abs=1e-12)

    def test_vectorized(self):
        basis = RateBasis(1, np.array([0.3, -0.049]))
        t = np.array([0.0, 10.0, 30.0])
        np.testing.assert_allclose(
            evaluate_rate(basis, t), np.exp(0.3 - 0.049 * t), rtol=1e-14
        )


class TestWeightedExposureSums:
    def test_empty(self):
        g = GroupObservations("g", {"ai": [], "ia": []})
        assert weighted_exposure_sums(g, {"ai": [0.0], "ia": [0.0]}) == (0.0, 0.0, 0, 0)

    def test_unit(self):
        g = GroupObservations("g", {"ai": [make_cell(1.0, 3)], "ia": [make_cell(1.0, 3)]})
        e_ai, e_ia, y_ai, y_ia = weighted_exposure_sums(g, {"ai": [0.0], "ia": [0.0]})
        assert (e_ai, e_ia, y_ai, y_ia) == (1.0, 1.0, 3, 3)

    def test_hand_sum(self):
        g = GroupObservations(
            "g", {"ai": [make_cell(1.0, 1), make_cell(2.0, 1)], "ia": []}
        )
        e_ai, e_ia, y_ai, y_ia = weighted_exposure_sums(g, {"ai": [0.0], "ia": [0.0]})
        assert e_ai == pytest.approx(3.0)
        assert y_ai == 2
        assert (e_ia, y_ia) == (0.0, 0)

    def test_additive_under_concatenation(self):
        rng = np.random.default_rng(7)
        betas = {"ai": rng.normal(size=1), "ia": rng.normal(size=1)}
        cells = [make_cell(rng.uniform(0.1, 5), int(rng.integers(0, 4))) for _ in range(8)]
        g_all = GroupObservations("g", {"ai": cells, "ia": []})
        g_a = GroupObservations("a", {"ai": cells[:3], "ia": []})
        g_b = GroupObservations("b", {"ai": cells[3:], "ia": []})
        full = weighted_exposure_sums(g_all, betas)
        part_a = weighted_exposure_sums(g_a, betas)
        part_b = weighted_exposure_sums(g_b, betas)
        assert full[0] == pytest.approx(part_a[0] + part_b[0], rel=1e-12)
        assert full[2] == part_a[2] + part_b[2]

    def test_dimension_mismatch(self):
        g = GroupObservations("g", {"ai": [make_cell(1.0, 0, (1.0, 2.0))], "ia": []})
        with pytest.raises(ConfigurationError):
            weighted_exposure_sums(g, {"ai": [0.0], "ia": [0.0]})


class TestInvariants:
    def test_cell_rejects_count_without_exposure(self):
        with pytest.raises(DataError):
            ObservationCell(0.0, 2, np.array([1.0]))

    def test_cell_rejects_negative_exposure(self):
        with pytest.raises(DataError):
            ObservationCell(-1.0, 0, np.array([1.0]))

    def test_dataset_rejects_duplicate_ids(self):
        g = GroupObservations("g", {"ai": [], "ia": []})
        h = GroupObservations("g", {"ai": [], "ia": []})
        with pytest.raises(DataError):
            PortfolioDataset(groups=(g, h), grid=np.array([0.0, 1.0]))

    def test_dataset_rejects_nonincreasing_grid(self):
        g = GroupObservations("g", {"ai": [], "ia": []})
        with pytest.raises(DataError):
            PortfolioDataset(groups=(g,), grid=np.array([0.0, 0.0, 1.0]))

    def test_rate_basis_dimension(self):
        with pytest.raises(ConfigurationError):
            RateBasis(2, np.array([1.0, 2.0]))


class TestPanelCsv:
    def test_round_trip(self, tmp_path):
        cells_ai = [
            ObservationCell(2.5, 1, covariate_row(2, 21.0)),
            ObservationCell(1.5, 0, covariate_row(2, 22.0)),
        ]
        cells_ia = [ObservationCell(0.5, 2, covariate_row(1, 22.0))]
        ds = single_group_dataset(cells_ai, cells_ia, grid=(20.0, 21.0, 22.0))
        path = tmp_path / "panel.csv"
        write_panel_csv(ds, path)
        back = read_panel_csv(path)
        assert back.group_ids == ["G1"]
        g = back.groups[0]
        assert len(g.cells["ai"]) == 2 and len(g.cells["ia"]) == 1
        for orig, rt in zip(cells_ai, g.cells["ai"]):
            assert rt.exposure == orig.exposure
            assert rt.count == orig.count
            np.testing.assert_allclose(rt.covariates, orig.covariates, rtol=1e-15)

    def test_header_required(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DataError):
            read_panel_csv(path)

    def test_extra_covariate_columns(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text(
            "group_id,characteristic,interval_index,t_right,exposure,count,x0,x1\n"
            "G1,ai,1,21.0,2.0,1,1.0,-0.5\n"
        )
        ds = read_panel_csv(path)
        np.testing.assert_allclose(ds.groups[0].cells["ai"][0].covariates, [1.0, -0.5])
