"""Prospective reserves for the disability product and equivalence premiums.

The reserve pair (V_a, V_i) solves a backward ODE system with terminal value
zero.  Without a waiting period the invalid reserve collapses to a single
function W_i with V_i(t, s) = 1{s <= coverage} W_i(t), and (V_a, W_i) is
integrated jointly by classical RK4 from the horizon back to issue.  With a
waiting period the invalid reserve is carried on a duration lattice (one
line per onset time on the same step), which is provided for completeness.

All solves are pure and independent across (group, age); the batch premium
path integrates the whole portfolio's groups simultaneously as a vector
state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError


def _as_fn(v):
    if callable(v):
        return v
    const = float(v)
    return lambda t: const


@dataclass(frozen=True)
class ProductSpec:
    """Disability product: annuity rate during invalidity plus onset lump sum.

    ``coverage`` limits claim onset (not payment duration); ``waiting`` delays
    the annuity after onset; benefits vanish beyond the ``horizon``.
    """

    coverage: float
    horizon: float
    waiting: float = 0.0
    annuity_rate: object = 1.0
    lump_sum: object = 0.0
    interest: object = 0.0

    def __post_init__(self):
        if self.horizon <= 0 or self.coverage <= 0 or self.waiting < 0:
            raise ConfigurationError("need horizon > 0, coverage > 0, waiting >= 0")


@dataclass(frozen=True)
class ThieleGrid:
    """Reserves on the backward time grid; V_i is (time, onset) when present."""

    times: np.ndarray
    V_a: np.ndarray
    W_i: np.ndarray = None
    V_i: np.ndarray = None
    s_grid: np.ndarray = None

    def premium(self):
        """Net single premium at issue, V_a(0)."""
        va0 = self.V_a[0]
        return float(va0) if np.ndim(va0) == 0 else np.asarray(va0)


def _rk4_backward(f, times, y_end):
    h = times[1] - times[0]
    y = np.array(y_end, dtype=float)
    out = [y.copy()]
    for j in range(len(times) - 1, 0, -1):
        t1 = times[j]
        k1 = f(t1, y)
        k2 = f(t1 - 0.5 * h, y - 0.5 * h * k1)
        k3 = f(t1 - 0.5 * h, y - 0.5 * h * k2)
        k4 = f(t1 - h, y - h * k3)
        y = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out.append(y.copy())
    out.reverse()
    return out


def solve_thiele(product: ProductSpec, rates: dict, step: float = 1.0 / 12.0) -> ThieleGrid:
    """Backward RK4 solve of the reserve system on a uniform grid.

    ``rates`` maps "ai", "ia", "ad", "id" to intensities on contract time
    (group effects already multiplied in).  Rate values may be vectors, in
    which case the whole batch is integrated at once.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive")
    T, tau, eps = product.horizon, product.coverage, product.waiting
    b_i, b_ai, r = _as_fn(product.annuity_rate), _as_fn(product.lump_sum), _as_fn(product.interest)
    mu_ai, mu_ia = _as_fn(rates["ai"]), _as_fn(rates["ia"])
    mu_ad, mu_id = _as_fn(rates["ad"]), _as_fn(rates["id"])
    n = max(1, int(round(T / step)))
    times = np.linspace(0.0, T, n + 1)

    if eps == 0.0:
        def deriv(t, y):
            va, wi = y
            on = 1.0 if t <= tau + 1e-12 else 0.0
            dva = (r(t) + mu_ad(t)) * va - on * (b_ai(t) + wi - va) * mu_ai(t)
            dwi = (r(t) + mu_id(t)) * wi - b_i(t) - (va - wi) * mu_ia(t)
            return np.stack([dva, dwi])

        shape = np.shape(mu_ai(0.0) + mu_ia(0.0) + mu_ad(0.0) + mu_id(0.0) + r(0.0))
        y_end = np.zeros((2,) + shape)
        path = _rk4_backward(deriv, times, y_end)
        va = np.stack([y[0] for y in path])
        wi = np.stack([y[1] for y in path])
        return ThieleGrid(times=times, V_a=va, W_i=wi)

    # Waiting period: one invalid-reserve line per onset time s <= coverage.
    s_grid = times[times <= min(tau, T) + 1e-12]
    L = len(s_grid)

    def deriv(t, y):
        va, vi = y[0], y[1:]
        on_t = 1.0 if t <= tau + 1e-12 else 0.0
        paying = (t - s_grid >= eps - 1e-12).astype(float)
        dvi = (r(t) + mu_id(t)) * vi - (paying * b_i(t) + (va - vi) * mu_ia(t))
        vi_diag = np.interp(min(t, s_grid[-1]), s_grid, vi)
        dva = (r(t) + mu_ad(t)) * va - on_t * (b_ai(t) + vi_diag - va) * mu_ai(t)
        return np.concatenate([[dva], dvi])

    path = _rk4_backward(deriv, times, np.zeros(1 + L))
    va = np.array([y[0] for y in path])
    vi = np.array([y[1:] for y in path])
    return ThieleGrid(times=times, V_a=va, V_i=vi, s_grid=s_grid)


def premium_for_entry_age(age: float, nodal_ages, nodal_premiums, low=20.0, high=67.0) -> float:
    """Linear interpolation of nodal (integer-age) premiums; exact at nodes."""
    if not low <= age <= high:
        raise ConfigurationError(f"entry age {age} outside [{low}, {high}]")
    return float(np.interp(age, np.asarray(nodal_ages, float), np.asarray(nodal_premiums, float)))


def nodal_premiums(
    effects,
    betas,
    mortality,
    interest: float = 0.01,
    coverage: float = 3.0,
    terminal_age: float = 67.0,
    age_low: int = 20,
    step: float = 1.0 / 12.0,
):
    """Premium per (group, integer entry age) for the unit disability annuity.

    ``effects`` is (n_groups, 2); ``betas`` maps characteristic to log-rate
    coefficients on absolute age; ``mortality`` maps "ad"/"id" to callables.
    One vectorised backward solve per entry age covers all groups.  Returns
    (ages, matrix) with matrix[g, idx] = V_a(0) for group g entering at
    ages[idx]; the premium at the terminal age is zero.
    """
    effects = np.asarray(effects, dtype=float)
    beta_ai = np.asarray(betas["ai"], dtype=float)
    beta_ia = np.asarray(betas["ia"], dtype=float)
    ages = np.arange(age_low, int(terminal_age) + 1)
    out = np.zeros((effects.shape[0], len(ages)))
    for idx, age in enumerate(ages[:-1]):
        T = terminal_age - age

        def poly_rate(beta, t):
            a = np.asarray(age + t, dtype=float)
            return np.exp(sum(b * a**m for m, b in enumerate(beta)))

        rates = {
            "ai": lambda t: effects[:, 0] * poly_rate(beta_ai, t),
            "ia": lambda t: effects[:, 1] * poly_rate(beta_ia, t),
            "ad": lambda t: mortality["ad"](age + t),
            "id": lambda t: mortality["id"](age + t),
        }
        grid = solve_thiele(
            ProductSpec(coverage=coverage, horizon=T, interest=interest),
            rates,
            step=step,
        )
        out[:, idx] = grid.premium()
    return ages, out


def portfolio_premiums(
    entry_ages,
    effects,
    betas,
    mortality,
    interest: float = 0.01,
    coverage: float = 3.0,
    terminal_age: float = 67.0,
    step: float = 1.0 / 12.0,
):
    """Per-insured equivalence premiums for the whole portfolio.

    ``entry_ages`` is a sequence of per-group arrays.  Nodal premiums are
    solved once per (group, integer age) and interpolated linearly for
    non-integer entry ages.  Returns a list of arrays mirroring
    ``entry_ages``.
    """
    effects = np.asarray(effects, dtype=float)
    if np.any(effects < 0):
        raise ConfigurationError("effects must be nonnegative")
    ages, nodal = nodal_premiums(
        effects, betas, mortality,
        interest=interest, coverage=coverage, terminal_age=terminal_age, step=step,
    )
    out = []
    for g, group_ages in enumerate(entry_ages):
        ga = np.asarray(group_ages, dtype=float)
        out.append(np.interp(ga, ages, nodal[g]))
    return out
