"""Domain types for grouped occurrence/exposure panels and log-linear rate bases.

A portfolio is observed as a panel: for every group and every transition
characteristic ("ai" = disability, "ia" = recovery) we keep one cell per age
interval holding the person-years of exposure, the transition count, and a
covariate row.  All estimators in this package consume these types and treat
them as immutable; every function here is pure, so concurrent evaluation
across groups needs no coordination.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CHARACTERISTICS = ("ai", "ia")

#: Polynomial degree of the log-rate in age, per characteristic.
BASIS_DEGREES = {"ai": 2, "ia": 1}


class ConfigurationError(ValueError):
    """Inconsistent shapes or options (e.g. covariate/coefficient mismatch)."""


class DataError(ValueError):
    """Malformed or out-of-range observation data."""


def covariate_row(degree: int, t: float) -> np.ndarray:
    """Monomial covariate row (1, t, ..., t**degree) for a log-polynomial rate."""
    return np.power(float(t), np.arange(degree + 1))


@dataclass(frozen=True)
class ObservationCell:
    """One (interval, characteristic) cell of a group's panel.

    ``exposure`` is person-years at risk, ``count`` the number of observed
    transitions, ``covariates`` the row x such that the conditional rate is
    ``theta * exp(x @ beta)``.
    """

    exposure: float
    count: int
    covariates: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.exposure) or self.exposure < 0:
            raise DataError(f"exposure must be finite and >= 0, got {self.exposure}")
        if self.count < 0:
            raise DataError(f"count must be >= 0, got {self.count}")
        if self.exposure == 0 and self.count > 0:
            raise DataError("cell with zero exposure cannot carry a positive count")
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim != 1 or not np.all(np.isfinite(cov)):
            raise DataError("covariates must be a finite 1-d vector")
        object.__setattr__(self, "covariates", cov)


@dataclass(frozen=True)
class GroupObservations:
    """All cells of one group, keyed by characteristic ("ai" and "ia")."""

    group_id: str
    cells: dict

    def __post_init__(self):
        for char in CHARACTERISTICS:
            self.cells.setdefault(char, [])

    def totals(self, char: str) -> tuple[float, int]:
        """Raw (exposure, count) totals for one characteristic."""
        cells = self.cells[char]
        return (sum(c.exposure for c in cells), sum(c.count for c in cells))


@dataclass(frozen=True)
class PortfolioDataset:
    """A collection of groups observed on a common age grid."""

    groups: tuple
    grid: np.ndarray

    def __post_init__(self):
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise DataError("group ids must be unique")
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 1 or len(grid) >= 2 and np.any(np.diff(grid) <= 0):
            raise DataError("grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def group_ids(self):
        return [g.group_id for g in self.groups]


@dataclass(frozen=True)
class RateBasis:
    """Log-polynomial transition rate mu(t) = exp(sum_m beta_m t^m)."""

    degree: int
    coefficients: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.coefficients, dtype=float)
        if beta.shape != (self.degree + 1,):
            raise ConfigurationError(
                f"degree {self.degree} basis needs {self.degree + 1} coefficients, got {beta.shape}"
            )
        object.__setattr__(self, "coefficients", beta)


def evaluate_rate(basis: RateBasis, t) -> np.ndarray:
    """Evaluate mu(t) = exp(sum_m beta_m t^m); positive for all finite t.

    Accepts scalar or array ``t``.
    """
    t = np.asarray(t, dtype=float)
    powers = t[..., None] ** np.arange(basis.degree + 1)
    return np.exp(powers @ basis.coefficients)


def weighted_exposure_sums(group: GroupObservations, betas: dict):
    """Group totals (e_ai, e_ia, y_ai, y_ia) under current regression coefficients.

    e_j is the rate-weighted exposure sum_i E_ij * exp(x_ij @ beta_j); y_j the
    raw count total.  Additive under concatenation of cell lists.
    """
    out = []
    counts = []
    for char in CHARACTERISTICS:
        beta = np.asarray(betas[char], dtype=float)
        e = 0.0
        y = 0
        for cell in group.cells[char]:
            if cell.covariates.shape != beta.shape:
                raise ConfigurationError(
                    f"group {group.group_id}/{char}: covariate row of length "
                    f"{cell.covariates.shape[0]} does not match beta of length {beta.shape[0]}"
                )
            e += cell.exposure * np.exp(float(cell.covariates @ beta))
            y += cell.count
        out.append(e)
        counts.append(y)
    return out[0], out[1], counts[0], counts[1]


@dataclass
class MixedPoissonFit:
    """Result of fitting one of the five portfolio models.

    ``group_posteriors`` maps group_id -> (theta_ai, theta_ia): posterior means
    for the mixing models, maximum likelihood effects for the fixed-effect
    model, and (1, 1) for the standard model.  ``prior`` is the fitted mixing
    prior (None for standard/fixed).  ``loglik_trace`` records the observed
    data loglikelihood across EM/ECM iterations.
    """

    model: str
    betas: dict
    prior: object
    group_posteriors: dict
    loglik: float
    iterations: int
    converged: bool
    loglik_trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Stacked array view used by the fitting routines
# ---------------------------------------------------------------------------


@dataclass
class StackedPanel:
    """Array view of a dataset: one row per cell, per characteristic.

    ``X[char]`` is (n_cells, h), ``E``/``y`` are aligned vectors and ``gidx``
    maps each cell to its group's index in ``dataset.groups``.
    """

    group_ids: list
    n_groups: int
    X: dict
    E: dict
    y: dict
    gidx: dict

    def cell_rates(self, char: str, beta) -> np.ndarray:
        """Per-cell rate-weighted exposures E_ij exp(x_ij beta)."""
        X = self.X[char]
        if X.shape[0] == 0:
            return np.zeros(0)
        return self.E[char] * np.exp(X @ np.asarray(beta, dtype=float))

    def weighted_exposures(self, char: str, beta) -> np.ndarray:
        """Per-group rate-weighted exposure totals e_{. j}(beta)."""
        return np.bincount(
            self.gidx[char], weights=self.cell_rates(char, beta), minlength=self.n_groups
        )

    def count_totals(self, char: str) -> np.ndarray:
        return np.bincount(
            self.gidx[char], weights=self.y[char], minlength=self.n_groups
        ).astype(int)


def stack_dataset(dataset: PortfolioDataset) -> StackedPanel:
    """Flatten a dataset into aligned arrays for vectorised fitting."""
    X, E, y, gidx = {}, {}, {}, {}
    for char in CHARACTERISTICS:
        rows, expo, cnt, idx = [], [], [], []
        for gi, group in enumerate(dataset.groups):
            for cell in group.cells[char]:
                rows.append(cell.covariates)
                expo.append(cell.exposure)
                cnt.append(cell.count)
                idx.append(gi)
        h = len(rows[0]) if rows else BASIS_DEGREES[char] + 1
        X[char] = np.array(rows, dtype=float).reshape(len(rows), h)
        E[char] = np.asarray(expo, dtype=float)
        y[char] = np.asarray(cnt, dtype=float)
        gidx[char] = np.asarray(idx, dtype=int)
    return StackedPanel(
        group_ids=list(dataset.group_ids),
        n_groups=len(dataset.groups),
        X=X,
        E=E,
        y=y,
        gidx=gidx,
    )


# ---------------------------------------------------------------------------
# Panel CSV interface
# ---------------------------------------------------------------------------

PANEL_HEADER = ["group_id", "characteristic", "interval_index", "t_right", "exposure", "count"]


def write_panel_csv(dataset: PortfolioDataset, path) -> None:
    """Write a dataset in the panel CSV schema (one row per cell)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PANEL_HEADER)
        grid = dataset.grid
        for group in dataset.groups:
            for char in CHARACTERISTICS:
                for cell in group.cells[char]:
                    t_right = cell.covariates[1] if len(cell.covariates) > 1 else grid[-1]
                    k = int(np.searchsorted(grid, t_right))
                    writer.writerow(
                        [group.group_id, char, k, repr(float(t_right)),
                         repr(float(cell.exposure)), int(cell.count)]
                    )


def read_panel_csv(path) -> PortfolioDataset:
    """Read a panel CSV back into a dataset.

    Covariate rows are rebuilt from ``t_right`` with the default polynomial
    bases unless extra ``x0, x1, ...`` columns are present, in which case
    those are used verbatim.
    """
    groups: dict = {}
    t_rights = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[: len(PANEL_HEADER)] != PANEL_HEADER:
            raise DataError(f"panel CSV must start with header {','.join(PANEL_HEADER)}")
        xcols = [c for c in reader.fieldnames if c.startswith("x")]
        for row in reader:
            char = row["characteristic"]
            if char not in CHARACTERISTICS:
                raise DataError(f"unknown characteristic {char!r}")
            t_right = float(row["t_right"])
            t_rights.add(t_right)
            if xcols:
                cov = np.array([float(row[c]) for c in xcols])
            else:
                cov = covariate_row(BASIS_DEGREES[char], t_right)
            cell = ObservationCell(float(row["exposure"]), int(row["count"]), cov)
            groups.setdefault(row["group_id"], {c: [] for c in CHARACTERISTICS})
            groups[row["group_id"]][char].append(cell)
    ts = np.array(sorted(t_rights))
    if len(ts) == 0:
        raise DataError("panel CSV holds no cells")
    t0 = ts[0] - (ts[1] - ts[0]) if len(ts) > 1 else ts[0] - 1.0
    grid = np.concatenate([[t0], ts])
    return PortfolioDataset(
        groups=tuple(GroupObservations(gid, cells) for gid, cells in groups.items()),
        grid=grid,
    )
