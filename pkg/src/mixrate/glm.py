"""Offset Poisson regression fitted by Newton's method.

This is the workhorse behind every M-step in the package and behind the two
reference models without random effects (the "standard" model, which ignores
groups, and the "fixed" model, which estimates one multiplicative effect per
group).  The log link is canonical, so the loglikelihood is concave and
Newton iteration with step halving converges globally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, xlogy

from .core import (
    CHARACTERISTICS,
    MixedPoissonFit,
    PortfolioDataset,
    StackedPanel,
    stack_dataset,
)

GRADIENT_TOL = 1e-10
LOGLIK_TOL = 1e-12
MAX_ITER = 100


class SingularFitError(RuntimeError):
    """Newton step failed: singular Hessian or non-finite update."""


@dataclass
class PoissonFitResult:
    beta: np.ndarray
    loglik: float
    iterations: int
    degenerate: bool = False


def _objective(X, y, offsets, beta):
    # Offset-Poisson loglik without the -log(y!) constant; xlogy keeps
    # zero-offset/zero-count cells at exactly 0.
    mu = offsets * np.exp(X @ beta)
    return float(np.sum(xlogy(y, mu)) - np.sum(mu))


def fit_poisson_arrays(X, y, offsets, init=None) -> PoissonFitResult:
    """Maximize sum_i [y_i (x_i b) - o_i exp(x_i b)] over b.

    Array fast path used by the EM loops; see :func:`fit_poisson` for the
    cell-level interface.  Cells with zero offset must carry zero counts and
    are dropped up front.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    if np.any((offsets <= 0) & (y > 0)):
        raise SingularFitError("positive count with nonpositive offset")
    keep = offsets > 0
    X, y, offsets = X[keep], y[keep], offsets[keep]
    n, h = X.shape
    if n == 0:
        raise SingularFitError("no cells with positive offset")

    if np.all(y == 0):
        if h == 1 and np.all(X == 1.0):
            # Intercept-only with no events: the MLE runs off to -inf.
            return PoissonFitResult(np.array([-np.inf]), 0.0, 0, degenerate=True)
        raise SingularFitError("all counts are zero; coefficients are unbounded")

    beta = np.zeros(h) if init is None else np.array(init, dtype=float)
    ll = _objective(X, y, offsets, beta)
    if not np.isfinite(ll):
        beta = np.zeros(h)
        ll = _objective(X, y, offsets, beta)

    it = 0
    for it in range(1, MAX_ITER + 1):
        mu = offsets * np.exp(X @ beta)
        grad = X.T @ (y - mu)
        if np.max(np.abs(grad)) <= GRADIENT_TOL * (1.0 + abs(ll)):
            break
        hess = X.T @ (mu[:, None] * X)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SingularFitError("singular Hessian in Poisson fit") from exc
        if not np.all(np.isfinite(step)):
            raise SingularFitError("non-finite Newton step in Poisson fit")
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            ll_new = _objective(X, y, offsets, cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-13 * (1.0 + abs(ll)):
                break
            t *= 0.5
        else:
            raise SingularFitError("step halving failed in Poisson fit")
        beta, ll_prev, ll = cand, ll, ll_new
        if abs(ll - ll_prev) <= LOGLIK_TOL * (1.0 + abs(ll)):
            mu = offsets * np.exp(X @ beta)
            if np.max(np.abs(X.T @ (y - mu))) <= GRADIENT_TOL * (1.0 + abs(ll)):
                break
    # Reported loglik keeps the y*log(offset) part, omitting only -log(y!).
    return PoissonFitResult(beta, ll, it)


def fit_poisson(cells, offsets, init=None) -> PoissonFitResult:
    """Offset Poisson fit from observation cells.

    ``offsets`` are the complete cell multipliers o_i (e.g. posterior-mean
    effect times exposure inside an M-step); the cells supply counts and
    covariate rows.
    """
    X = np.array([c.covariates for c in cells], dtype=float)
    y = np.array([c.count for c in cells], dtype=float)
    return fit_poisson_arrays(X, y, np.asarray(offsets, dtype=float), init=init)


def poisson_loglik(cells, offsets, beta) -> float:
    """Full Poisson loglikelihood sum_i [y log(o e^{xb}) - o e^{xb} - log(y!)]."""
    X = np.array([c.covariates for c in cells], dtype=float)
    y = np.array([c.count for c in cells], dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    mu = offsets * np.exp(X @ np.asarray(beta, dtype=float))
    return float(np.sum(xlogy(y, mu) - mu - gammaln(y + 1)))


def _full_loglik(panel: StackedPanel, betas, effects) -> float:
    """Portfolio Poisson loglik with per-group multiplicative effects."""
    total = 0.0
    for char in CHARACTERISTICS:
        mu = effects[char][panel.gidx[char]] * panel.cell_rates(char, betas[char])
        total += float(np.sum(xlogy(panel.y[char], mu) - mu - gammaln(panel.y[char] + 1)))
    return total


def fit_standard(dataset: PortfolioDataset, init=None) -> MixedPoissonFit:
    """Poisson regression with no group effects (all effects identically 1)."""
    panel = stack_dataset(dataset)
    betas = {}
    iters = 0
    for char in CHARACTERISTICS:
        res = fit_poisson_arrays(
            panel.X[char], panel.y[char], panel.E[char],
            init=None if init is None else init.get(char),
        )
        betas[char] = res.beta
        iters = max(iters, res.iterations)
    ones = {c: np.ones(panel.n_groups) for c in CHARACTERISTICS}
    ll = _full_loglik(panel, betas, ones)
    return MixedPoissonFit(
        model="standard",
        betas=betas,
        prior=None,
        group_posteriors={gid: (1.0, 1.0) for gid in panel.group_ids},
        loglik=ll,
        iterations=iters,
        converged=True,
        loglik_trace=[ll],
    )


def fit_fixed_effects(dataset: PortfolioDataset, init=None) -> MixedPoissonFit:
    """Per-group multiplicative effects estimated as fixed effects.

    One Poisson regression per characteristic with group indicators; groups
    without occurrences get effect exactly 0.  The per-group intercepts and
    the baseline intercept are only jointly identified, so the baseline
    intercept is pinned at 0 and all scale sits in the effects (downstream
    uses are invariant to this split).
    """
    panel = stack_dataset(dataset)
    betas = {}
    effects = {}
    iters = 0
    for char in CHARACTERISTICS:
        X, y, E, gidx = panel.X[char], panel.y[char], panel.E[char], panel.gidx[char]
        ysum = panel.count_totals(char)
        pos = np.flatnonzero(ysum > 0)
        if len(pos) == 0:
            betas[char] = np.zeros(X.shape[1])
            effects[char] = np.zeros(panel.n_groups)
            continue
        pos_of = -np.ones(panel.n_groups, dtype=int)
        pos_of[pos] = np.arange(len(pos))
        keep = pos_of[gidx] >= 0
        Xk, yk, Ek, gk = X[keep], y[keep], E[keep], pos_of[gidx[keep]]
        # Group dummies replace the global intercept; remaining columns are
        # the age terms of the basis.
        dummies = np.zeros((len(yk), len(pos)))
        dummies[np.arange(len(yk)), gk] = 1.0
        design = np.hstack([dummies, Xk[:, 1:]])
        start = None
        if init is not None and char in init:
            b0 = np.asarray(init[char], dtype=float)
            start = np.concatenate([np.full(len(pos), b0[0]), b0[1:]])
        res = fit_poisson_arrays(design, yk, Ek, init=start)
        iters = max(iters, res.iterations)
        beta = np.concatenate([[0.0], res.beta[len(pos):]])
        theta = np.zeros(panel.n_groups)
        theta[pos] = np.exp(res.beta[: len(pos)])
        betas[char] = beta
        effects[char] = theta
    ll = _full_loglik(panel, betas, effects)
    return MixedPoissonFit(
        model="fixed",
        betas=betas,
        prior=None,
        group_posteriors={
            gid: (effects["ai"][i], effects["ia"][i]) for i, gid in enumerate(panel.group_ids)
        },
        loglik=ll,
        iterations=iters,
        converged=True,
        loglik_trace=[ll],
    )
