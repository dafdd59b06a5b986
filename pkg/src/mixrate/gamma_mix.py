"""Independent-Gamma mixed Poisson model (the "simple" shrinkage model).

Each characteristic j gets its own latent multiplier Theta_j ~ Gamma with
shape = rate = 1/psi_j, so E(Theta_j) = 1 and Var(Theta_j) = psi_j.  The
marginal counts are multivariate negative binomial, the posterior is Gamma by
conjugacy, and the model is fitted by EM: closed-form E-step, Poisson GLMs
plus a single Newton update of each psi_j in the M-step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma, xlogy

from .core import CHARACTERISTICS, MixedPoissonFit, PortfolioDataset, stack_dataset
from .glm import fit_poisson_arrays


@dataclass(frozen=True)
class GammaPrior:
    """Unit-mean Gamma priors; psi_j is the variance of Theta_j."""

    psi_ai: float
    psi_ia: float

    def __post_init__(self):
        if self.psi_ai <= 0 or self.psi_ia <= 0:
            raise ValueError("psi must be positive")

    def psi(self, char: str) -> float:
        return self.psi_ai if char == "ai" else self.psi_ia


def posterior_gamma(y_bullet: float, e_bullet: float, gamma_j: float):
    """Posterior (shape, rate) of Theta_j given group totals.

    Conjugate update: shape = y + 1/gamma_j, rate = e + 1/gamma_j.  The
    posterior mean shape/rate is the shrinkage estimator; with no data it
    equals the prior mean 1.
    """
    if np.any(np.asarray(y_bullet) < 0) or np.any(np.asarray(e_bullet) < 0) or gamma_j <= 0:
        raise ValueError("need y >= 0, e >= 0, gamma > 0")
    inv = 1.0 / gamma_j
    return (y_bullet + inv, e_bullet + inv)


def _group_logliks(panel, betas, prior: GammaPrior) -> np.ndarray:
    """Observed-data loglik per group, all terms in log space."""
    out = np.zeros(panel.n_groups)
    for char in CHARACTERISTICS:
        alpha = 1.0 / prior.psi(char)
        e_cells = panel.cell_rates(char, betas[char])
        cell_terms = xlogy(panel.y[char], e_cells) - gammaln(panel.y[char] + 1)
        out += np.bincount(panel.gidx[char], weights=cell_terms, minlength=panel.n_groups)
        e = np.bincount(panel.gidx[char], weights=e_cells, minlength=panel.n_groups)
        y = panel.count_totals(char)
        out += (
            gammaln(y + alpha)
            - gammaln(alpha)
            + alpha * np.log(alpha)
            - (y + alpha) * np.log(alpha + e)
        )
    return out


def loglik_independent_gamma(dataset: PortfolioDataset, betas, prior: GammaPrior) -> float:
    """Exact multivariate negative binomial loglikelihood of the portfolio."""
    panel = stack_dataset(dataset)
    b = {c: np.asarray(betas[c], dtype=float) for c in CHARACTERISTICS}
    return float(np.sum(_group_logliks(panel, b, prior)))


def _update_psi(alpha, e_mean, elog_mean, n_groups):
    # One Newton step on the expected Gamma-prior loglikelihood in alpha=1/psi;
    # the objective is concave (psi'(a) > 1/a), halve into the positive axis.
    grad = n_groups * (np.log(alpha) + 1.0 - digamma(alpha)) + elog_mean - e_mean
    hess = n_groups * (1.0 / alpha - polygamma(1, alpha))
    step = -grad / hess
    while alpha + step <= 0:
        step *= 0.5
    # Pure-Poisson data drives alpha -> inf; cap to keep gammaln well scaled.
    return min(alpha + step, 1e10)


def em_fit_independent_gamma(
    dataset: PortfolioDataset,
    init=None,
    psi_init=1.0,
    tol=1e-9,
    max_iter=500,
) -> MixedPoissonFit:
    """EM fit of the independent-Gamma model.

    E-step per group: E(Theta_j | y) = (y + 1/psi) / (e + 1/psi) and
    E(log Theta_j | y) = digamma(y + 1/psi) - log(e + 1/psi).  M-step: one
    offset Poisson GLM per characteristic with offsets E(Theta|y) * E_ij,
    then a Newton update of each psi_j.  The observed loglikelihood trace is
    nondecreasing; if ``max_iter`` is hit the best iterate is returned with
    ``converged=False``.
    """
    panel = stack_dataset(dataset)
    betas = {}
    for char in CHARACTERISTICS:
        start = None if init is None else init.get(char)
        betas[char] = fit_poisson_arrays(panel.X[char], panel.y[char], panel.E[char], init=start).beta
    alphas = {c: 1.0 / psi_init for c in CHARACTERISTICS}
    ysums = {c: panel.count_totals(c).astype(float) for c in CHARACTERISTICS}

    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prior = GammaPrior(1.0 / alphas["ai"], 1.0 / alphas["ia"])
        ll = float(np.sum(_group_logliks(panel, betas, prior)))
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * (1.0 + abs(trace[-1])):
            converged = True
            break
        post_mean = {}
        for char in CHARACTERISTICS:
            a = alphas[char]
            e = panel.weighted_exposures(char, betas[char])
            y = ysums[char]
            mean = (y + a) / (e + a)
            elog = digamma(y + a) - np.log(e + a)
            post_mean[char] = mean
            alphas[char] = _update_psi(a, np.sum(mean), np.sum(elog), panel.n_groups)
        for char in CHARACTERISTICS:
            offsets = post_mean[char][panel.gidx[char]] * panel.E[char]
            betas[char] = fit_poisson_arrays(
                panel.X[char], panel.y[char], offsets, init=betas[char]
            ).beta

    prior = GammaPrior(1.0 / alphas["ai"], 1.0 / alphas["ia"])
    posts = {}
    means = {}
    for char in CHARACTERISTICS:
        e = panel.weighted_exposures(char, betas[char])
        shape, rate = posterior_gamma(ysums[char], e, prior.psi(char))
        means[char] = shape / rate
    for i, gid in enumerate(panel.group_ids):
        posts[gid] = (float(means["ai"][i]), float(means["ia"][i]))
    return MixedPoissonFit(
        model="simple",
        betas=betas,
        prior=prior,
        group_posteriors=posts,
        loglik=trace[-1],
        iterations=it,
        converged=converged,
        loglik_trace=trace,
    )
