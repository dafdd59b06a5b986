"""Simulation of a group disability portfolio (active / invalid / dead).

Builds the study scenarios: heavily skewed group sizes, mixture entry ages,
Clayton-coupled group effects with unit-mean margins, and per-insured paths
of the three-state Markov chain simulated by thinning against a piecewise
constant majorant on one-year age spans.  Paths are aggregated into the
occurrence/exposure panel consumed by the estimators.

Reproducibility: every random quantity is drawn from a counter-based Philox
substream keyed by (seed, purpose, replication, group, insured), so results
do not depend on execution order and the portfolio frame (sizes, ages,
effects) stays fixed across replications.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import brentq

from .core import (
    BASIS_DEGREES,
    CHARACTERISTICS,
    DataError,
    GroupObservations,
    ObservationCell,
    PortfolioDataset,
    covariate_row,
)

TRUE_BETAS = {
    "ai": np.array([-4.5, -0.018, 0.00064]),
    "ia": np.array([0.3, -0.049]),
}

CASE_IDS = {"A": 1, "B": 2, "C": 3}
CASE_KENDALL = {"A": 0.0, "B": 0.5, "C": -0.5}
CASE_MARGINAL = {"A": "gamma", "B": "mixture", "C": "mixture"}

#: Scaled two-component Gamma mixture used for the B/C margins.
MIXTURE_WEIGHTS = (0.85, 0.15)
MIXTURE_SHAPES = (5.0, 2.0)
MIXTURE_RATES = (2.0, 6.0)
MIXTURE_MEAN = 0.85 * 2.5 + 0.15 * (1.0 / 3.0)  # = 2.175


def mortality_rate_active(t):
    """mu_ad(t) = 0.0005 + 10^(5.88 + 0.038 t - 10) (known, not estimated)."""
    return 0.0005 + 10.0 ** (5.88 + 0.038 * np.asarray(t, dtype=float) - 10.0)


def mortality_rate_disabled(t):
    """mu_id(t) = exp(-7.25 + 0.07 t) (known, not estimated)."""
    return np.exp(-7.25 + 0.07 * np.asarray(t, dtype=float))


def disability_rate(t):
    t = np.asarray(t, dtype=float)
    return np.exp(-4.5 - 0.018 * t + 0.00064 * t * t)


def recovery_rate(t):
    return np.exp(0.3 - 0.049 * np.asarray(t, dtype=float))


def substream(seed: int, *ids) -> np.random.Generator:
    """Philox generator keyed by (seed, FNV-mixed ids); order independent."""
    mix = 0xCBF29CE484222325
    for val in ids:
        mix ^= int(val) & 0xFFFFFFFFFFFFFFFF
        mix = (mix * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, mix], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ScenarioConfig:
    """One study scenario; kendall_tau and marginal default from the case."""

    case: str = "A"
    seed: int = 0
    n_groups: int = 100
    total_insured: int = 50000
    coverage_years: float = 3.0
    terminal_age: float = 67.0
    age_low: float = 20.0
    age_high: float = 67.0
    kendall_tau: float = None
    marginal: str = None

    def __post_init__(self):
        if self.case not in CASE_IDS:
            raise ValueError(f"case must be one of {sorted(CASE_IDS)}")
        if self.coverage_years <= 0:
            raise ValueError("coverage period must be positive")
        if self.kendall_tau is None:
            object.__setattr__(self, "kendall_tau", CASE_KENDALL[self.case])
        if self.marginal is None:
            object.__setattr__(self, "marginal", CASE_MARGINAL[self.case])


@dataclass(frozen=True)
class SimulatedPath:
    """Event history of one insured from entry to end of observation."""

    entry_age: float
    events: tuple          # (age, kind) with kind in {"ai", "ia", "ad", "id"}
    termination_age: float
    final_state: str       # state at termination: "a", "i" or "d"

    def __post_init__(self):
        ages = [a for a, _ in self.events]
        if ages != sorted(ages):
            raise DataError("events must be age ordered")
        if any(a > self.termination_age + 1e-12 for a in ages):
            raise DataError("event after termination")


def sample_group_sizes(config: ScenarioConfig, rng) -> np.ndarray:
    """Heavy-tailed sizes: Gamma(0.05, rate 1e-4) draws rescaled to the total.

    Rounding residuals go to the groups with the largest fractional parts;
    every group keeps at least one insured and the sizes sum exactly to
    ``total_insured``.
    """
    n, total = config.n_groups, config.total_insured
    if n == 1:
        return np.array([total])
    raw = rng.gamma(0.05, 1.0 / 0.0001, size=n)
    raw = np.maximum(raw, 1e-12)
    scaled = raw / raw.sum() * total
    sizes = np.maximum(1, np.floor(scaled).astype(int))
    frac_order = np.argsort(-(scaled - np.floor(scaled)), kind="stable")
    i = 0
    while sizes.sum() < total:
        sizes[frac_order[i % n]] += 1
        i += 1
    big_order = np.argsort(-sizes, kind="stable")
    i = 0
    while sizes.sum() > total:
        g = big_order[i % n]
        if sizes[g] > 1:
            sizes[g] -= 1
        i += 1
    return sizes


def _gompertz_ppf(u, shape=0.1, rate=0.002):
    return np.log1p(-(shape / rate) * np.log1p(-u)) / shape


def sample_entry_ages(n: int, rng, weights=(0.25, 0.35, 0.40), low=20.0, high=67.0) -> np.ndarray:
    """Entry ages from the Weibull/Normal/Gompertz mixture, rejected into range."""
    if n == 0:
        return np.zeros(0)
    out = np.empty(0)
    weights = np.asarray(weights, dtype=float)
    while out.size < n:
        m = max(2 * (n - out.size), 16)
        comp = rng.choice(3, size=m, p=weights)
        draws = np.empty(m)
        w = comp == 0
        draws[w] = 15.0 * rng.weibull(3.0, size=int(w.sum()))
        nr = comp == 1
        draws[nr] = rng.normal(47.0, 7.0, size=int(nr.sum()))
        go = comp == 2
        draws[go] = _gompertz_ppf(rng.random(int(go.sum())))
        ok = (draws >= low) & (draws <= high)
        out = np.concatenate([out, draws[ok]])
    return out[:n]


def sample_clayton_pair(kendall_tau: float, rng, size: int = 1) -> np.ndarray:
    """(size, 2) uniforms from a Clayton copula by conditional inversion.

    theta = 2 tau / (1 - tau) covers positive and negative dependence
    (theta in [-1, inf) \\ {0}); tau = 0 returns independent uniforms.
    """
    if not -1.0 < kendall_tau < 1.0:
        raise ValueError("kendall_tau must lie in (-1, 1)")
    u = np.clip(rng.random(size), 1e-15, 1.0 - 1e-15)
    p = np.clip(rng.random(size), 1e-15, 1.0 - 1e-15)
    if kendall_tau == 0.0:
        return np.column_stack([u, p])
    theta = 2.0 * kendall_tau / (1.0 - kendall_tau)
    v = (u ** (-theta) * (p ** (-theta / (1.0 + theta)) - 1.0) + 1.0) ** (-1.0 / theta)
    return np.column_stack([u, np.clip(v, 1e-15, 1.0 - 1e-15)])


def _mixture_cdf(x):
    return MIXTURE_WEIGHTS[0] * stats.gamma.cdf(x, MIXTURE_SHAPES[0], scale=1.0 / MIXTURE_RATES[0]) + (
        MIXTURE_WEIGHTS[1] * stats.gamma.cdf(x, MIXTURE_SHAPES[1], scale=1.0 / MIXTURE_RATES[1])
    )


def _marginal_ppf(u: np.ndarray, marginal: str) -> np.ndarray:
    if marginal == "gamma":
        return stats.gamma.ppf(u, 10.0 / 3.0, scale=3.0 / 10.0)
    # Scaled mixture: root-find the mixture quantile, then divide by its mean.
    out = np.empty_like(u)
    hi0 = float(stats.gamma.ppf(np.max(u), MIXTURE_SHAPES[0], scale=1.0 / MIXTURE_RATES[0])) + 10.0
    for i, ui in enumerate(u):
        out[i] = brentq(lambda x: _mixture_cdf(x) - ui, 0.0, hi0, xtol=1e-12)
    return out / MIXTURE_MEAN


def sample_effect_pairs(config: ScenarioConfig, rng, size: int) -> np.ndarray:
    """(size, 2) latent effects: copula uniforms through the marginal quantile."""
    uv = sample_clayton_pair(config.kendall_tau, rng, size=size)
    return np.column_stack(
        [_marginal_ppf(uv[:, 0], config.marginal), _marginal_ppf(uv[:, 1], config.marginal)]
    )


def sample_group_effects(config: ScenarioConfig, rng) -> np.ndarray:
    """(n_groups, 2) positive effects (theta_ai, theta_ia) for the portfolio."""
    return sample_effect_pairs(config, rng, config.n_groups)


# ---------------------------------------------------------------------------
# Path simulation by thinning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateSet:
    """The four transition intensities as functions of absolute age.

    ``ai_log_vertex`` marks the interior critical age of the disability
    rate's log-polynomial (the only non-monotone candidate); the other three
    study rates are monotone on every age span.
    """

    ai: callable = disability_rate
    ia: callable = recovery_rate
    ad: callable = mortality_rate_active
    id: callable = mortality_rate_disabled
    ai_log_vertex: float = field(
        default=-TRUE_BETAS["ai"][1] / (2.0 * TRUE_BETAS["ai"][2])
    )


TRUE_RATES = RateSet()


def _span_max(fn, lo, hi, vertex=None):
    cand = [fn(lo), fn(hi)]
    if vertex is not None and lo < vertex < hi:
        cand.append(fn(vertex))
    return max(float(c) for c in cand)


def _next_event(x0, x_end, comps, rng):
    """First accepted event of competing hazards on [x0, x_end) by thinning.

    ``comps`` is a list of (kind, rate_fn, vertex); the majorant on each
    one-year age span is the sum of per-component span maxima, a valid upper
    bound because every component attains its span maximum at an endpoint or
    at its single interior critical point.
    """
    x = x0
    while x < x_end - 1e-12:
        span_end = min(np.floor(x + 1e-12) + 1.0, x_end)
        lam_bar = sum(_span_max(fn, x, span_end, vx) for _, fn, vx in comps)
        lam_bar *= 1.0 + 1e-12
        if lam_bar <= 0.0:
            x = span_end
            continue
        while x < span_end - 1e-12:
            x = x + rng.exponential(1.0 / lam_bar)
            if x >= span_end:
                x = span_end
                break
            rates = np.array([float(fn(x)) for _, fn, _ in comps])
            total = rates.sum()
            if rng.random() * lam_bar <= total:
                pick = rng.random() * total
                acc = 0.0
                for (kind, _, _), r in zip(comps, rates):
                    acc += r
                    if pick <= acc:
                        return x, kind
                return x, comps[-1][0]
    return None


def simulate_path(
    entry_age: float,
    effects,
    config: ScenarioConfig,
    rng,
    rates: RateSet = TRUE_RATES,
) -> SimulatedPath:
    """Simulate one insured from entry until end of observation.

    In state "a" the hazards are theta_ai mu_ai and mu_ad; in state "i" they
    are theta_ia mu_ia and mu_id.  Observation ends at death, at the terminal
    age, or at the first presence in state "a" at contract time >= coverage:
    actives leave at exactly entry + coverage, and an open claim runs until
    recovery (which ends observation at the recovery event), death, or the
    terminal age.
    """
    theta_ai, theta_ia = float(effects[0]), float(effects[1])
    tau = config.coverage_years
    T_age = config.terminal_age
    if not config.age_low <= entry_age <= config.age_high:
        raise ValueError(f"entry age {entry_age} outside [{config.age_low}, {config.age_high}]")

    comps_a = [
        ("ai", lambda t: theta_ai * rates.ai(t), rates.ai_log_vertex if theta_ai > 0 else None),
        ("ad", rates.ad, None),
    ]
    comps_i = [
        ("ia", lambda t: theta_ia * rates.ia(t), None),
        ("id", rates.id, None),
    ]

    x = entry_age
    state = "a"
    events = []
    active_limit = min(T_age, entry_age + tau)
    while True:
        if state == "a":
            nxt = _next_event(x, active_limit, comps_a, rng)
            if nxt is None:
                return SimulatedPath(entry_age, tuple(events), active_limit, "a")
            x, kind = nxt
            events.append((x, kind))
            if kind == "ad":
                return SimulatedPath(entry_age, tuple(events), x, "d")
            state = "i"
        else:
            nxt = _next_event(x, T_age, comps_i, rng)
            if nxt is None:
                return SimulatedPath(entry_age, tuple(events), T_age, "i")
            x, kind = nxt
            events.append((x, kind))
            if kind == "id":
                return SimulatedPath(entry_age, tuple(events), x, "d")
            if x - entry_age >= tau:
                # Recovery at contract time >= coverage ends observation.
                return SimulatedPath(entry_age, tuple(events), x, "a")
            state = "a"


# ---------------------------------------------------------------------------
# Aggregation into the panel
# ---------------------------------------------------------------------------


def _add_exposure(vec, grid, lo, hi):
    if hi <= lo:
        return
    if lo < grid[0] - 1e-9 or hi > grid[-1] + 1e-9:
        raise DataError("sojourn outside the aggregation grid")
    k0 = int(np.clip(np.searchsorted(grid, lo, side="right") - 1, 0, len(grid) - 2))
    k1 = int(np.clip(np.searchsorted(grid, hi, side="left") - 1, 0, len(grid) - 2))
    for k in range(k0, k1 + 1):
        vec[k] += max(0.0, min(hi, grid[k + 1]) - max(lo, grid[k]))


def _interval_of(grid, age):
    # Intervals are (grid[k], grid[k+1]]; events sit in the left-open cell.
    if age <= grid[0] or age > grid[-1] + 1e-9:
        raise DataError(f"event age {age} outside the aggregation grid")
    return int(np.clip(np.searchsorted(grid, age, side="left") - 1, 0, len(grid) - 2))


def aggregate_panel(paths_by_group: dict, grid) -> PortfolioDataset:
    """Turn path histories into the per-group occurrence/exposure panel.

    Exposures split sojourn time over the age intervals; occurrences count
    the "ai" and "ia" transitions per interval.  Covariate rows are the
    polynomial bases evaluated at the interval's right endpoint.
    """
    grid = np.asarray(grid, dtype=float)
    K = len(grid) - 1
    groups = []
    for gid, paths in paths_by_group.items():
        expo = {c: np.zeros(K) for c in CHARACTERISTICS}
        occ = {c: np.zeros(K, dtype=int) for c in CHARACTERISTICS}
        for path in paths:
            state, t0 = "a", path.entry_age
            for age, kind in path.events:
                _add_exposure(expo["ai" if state == "a" else "ia"], grid, t0, age)
                if kind in CHARACTERISTICS:
                    occ[kind][_interval_of(grid, age)] += 1
                state = {"ai": "i", "ia": "a", "ad": "d", "id": "d"}[kind]
                t0 = age
            if state != "d":
                _add_exposure(expo["ai" if state == "a" else "ia"], grid, t0, path.termination_age)
        cells = {c: [] for c in CHARACTERISTICS}
        for char in CHARACTERISTICS:
            for k in range(K):
                if expo[char][k] > 0.0:
                    cells[char].append(
                        ObservationCell(
                            float(expo[char][k]),
                            int(occ[char][k]),
                            covariate_row(BASIS_DEGREES[char], grid[k + 1]),
                        )
                    )
                elif occ[char][k] > 0:
                    raise DataError("transition recorded without exposure")
        groups.append(GroupObservations(gid, cells))
    return PortfolioDataset(groups=tuple(groups), grid=grid)


# ---------------------------------------------------------------------------
# Portfolio driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PortfolioFrame:
    """The fixed part of a scenario: sizes, entry ages and effects per group."""

    config: ScenarioConfig
    group_ids: tuple
    sizes: np.ndarray
    entry_ages: tuple       # one array per group
    effects: np.ndarray     # (n_groups, 2)


def build_frame(config: ScenarioConfig) -> PortfolioFrame:
    """Draw the once-per-case quantities from dedicated substreams."""
    case = CASE_IDS[config.case]
    sizes = sample_group_sizes(config, substream(config.seed, case, 1))
    ages_rng = substream(config.seed, case, 2)
    entry_ages = tuple(
        sample_entry_ages(int(s), ages_rng, low=config.age_low, high=config.age_high)
        for s in sizes
    )
    effects = sample_group_effects(config, substream(config.seed, case, 3))
    width = len(str(config.n_groups))
    gids = tuple(f"G{i + 1:0{width}d}" for i in range(config.n_groups))
    return PortfolioFrame(config, gids, sizes, entry_ages, effects)


def simulate_paths_dataset(frame: PortfolioFrame, replication: int = 0) -> PortfolioDataset:
    """Re-simulate all paths for one replication and aggregate the panel."""
    config = frame.config
    case = CASE_IDS[config.case]
    grid = np.arange(np.floor(config.age_low), np.ceil(config.terminal_age) + 1.0)
    paths_by_group = {}
    for g, gid in enumerate(frame.group_ids):
        paths = []
        for i, age in enumerate(frame.entry_ages[g]):
            rng = substream(config.seed, case, 4, replication, g, i)
            paths.append(simulate_path(age, frame.effects[g], config, rng))
        paths_by_group[gid] = paths
    return aggregate_panel(paths_by_group, grid)
