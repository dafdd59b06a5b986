import numpy as np
import pytest

from mixrate.core import GroupObservations, ObservationCell, PortfolioDataset, covariate_row


def make_cell(exposure, count, cov=(1.0,)):
    return ObservationCell(exposure, count, np.asarray(cov, dtype=float))


def single_group_dataset(cells_ai, cells_ia=(), group_id="G1", grid=(0.0, 1.0)):
    group = GroupObservations(group_id, {"ai": list(cells_ai), "ia": list(cells_ia)})
    return PortfolioDataset(groups=(group,), grid=np.asarray(grid, dtype=float))


def poisson_panel(rng, effects, exposures, rates=(0.1, 0.2)):
    """Panel with one intercept-only cell per characteristic per group.

    ``effects`` is (n, 2); counts are Poisson(theta * E * rate).  Gives exact
    mixed Poisson data without path simulation, for estimator tests.
    """
    groups = []
    effects = np.asarray(effects, dtype=float)
    exposures = np.broadcast_to(np.asarray(exposures, dtype=float), effects.shape)
    for g in range(effects.shape[0]):
        cells = {}
        for ci, char in enumerate(("ai", "ia")):
            lam = effects[g, ci] * exposures[g, ci] * rates[ci]
            y = int(rng.poisson(lam))
            cells[char] = [ObservationCell(exposures[g, ci], y, np.array([1.0]))]
        groups.append(GroupObservations(f"G{g:04d}", cells))
    return PortfolioDataset(groups=tuple(groups), grid=np.array([0.0, 1.0]))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240917)
