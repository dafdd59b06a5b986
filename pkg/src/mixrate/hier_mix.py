"""Hierarchical Gamma mixing with exact finite-mixture posteriors.

The latent root Theta_0 ~ Gamma(shape eta, rate nu) drives conditionally
independent Theta_j | Theta_0 ~ Gamma(Theta_0, eta/nu), giving unit means,
Var(Theta_j) = (nu+1)/eta and Corr(Theta_j, Theta_k) = 1/(1+nu) > 0.  Given
group totals, the posterior of Theta_0 is a finite mixture of Gamma laws
whose weights come from two recurrences: polynomial coefficients a_m of
prod_s (theta + s)^{o_s} and Gamma-ratio factors b_m.  Both are carried in
log space throughout (counts in the thousands overflow the plain scheme).

Fitting is by ECM: exact E-step from the mixture, Poisson GLMs for the
regression coefficients, a closed-form update of nu, and a single guarded
Newton step for eta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma, xlogy

from .core import CHARACTERISTICS, MixedPoissonFit, PortfolioDataset, stack_dataset
from .glm import fit_poisson_arrays

NEG_INF = -np.inf


def _lse(a: np.ndarray) -> float:
    # scipy's logsumexp carries array-API dispatch overhead; this sits in the
    # per-group inner loop of the ECM, so keep it bare.
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(a - m))))


@dataclass(frozen=True)
class HierPrior:
    """Root Gamma(eta, nu) prior; delta = eta/nu is the conditional rate."""

    eta: float
    nu: float

    def __post_init__(self):
        if self.eta <= 0 or self.nu <= 0:
            raise ValueError("eta and nu must be positive")

    @property
    def delta(self) -> float:
        return self.eta / self.nu

    @property
    def variance(self) -> float:
        return (self.nu + 1.0) / self.eta

    @property
    def correlation(self) -> float:
        return 1.0 / (1.0 + self.nu)


def sample_hier_prior(prior: HierPrior, size: int, rng, q: int = 2) -> np.ndarray:
    """Draw (size, q) samples of (Theta_1..Theta_q) from the hierarchical prior."""
    theta0 = rng.gamma(prior.eta, 1.0 / prior.nu, size=size)
    return rng.gamma(theta0[:, None], 1.0 / prior.delta, size=(size, q))


def occupancy_vector(y_bullets) -> np.ndarray:
    """o_m = #{j : y_j > m} for m = 0..r with r = max(max_j y_j - 1, 1)."""
    y = np.asarray(y_bullets, dtype=int)
    if y.size < 1:
        raise ValueError("need at least one characteristic")
    r = max(int(y.max(initial=0)) - 1, 1)
    m = np.arange(r + 1)
    return np.sum(y[None, :] > m[:, None], axis=1)


def polynomial_coefficients(o) -> np.ndarray:
    """log coefficients of theta^m in prod_s (theta + s)^{o_s}.

    Built by applying a_m(o* + c_s) = s a_m(o*) + a_{m-1}(o*) once per factor
    along the coordinate-ascending path, entirely in log space (-inf marks a
    zero coefficient).
    """
    o = np.asarray(o, dtype=int)
    deg = int(o.sum())
    log_a = np.full(deg + 1, NEG_INF)
    log_a[0] = 0.0
    top = 0
    for s, count in enumerate(o):
        if count == 0:
            continue
        if s == 0:
            # Factor theta^{o_0}: a pure shift of the coefficients.
            log_a[count : top + count + 1] = log_a[: top + 1]
            log_a[:count] = NEG_INF
            top += count
            continue
        log_s = np.log(s)
        for _ in range(count):
            shifted = np.concatenate([[NEG_INF], log_a[: top + 1]])
            log_a[: top + 2] = np.logaddexp(log_s + np.concatenate([log_a[: top + 1], [NEG_INF]]), shifted)
            top += 1
    return log_a


def gamma_ratio_coefficients(eta: float, nu: float, e_bullets, m_max: int) -> np.ndarray:
    """log b_m = lgamma(m+eta) - lgamma(eta) - m log(sum_j log1p((nu/eta) e_j) + nu)."""
    denom = mixture_rate(eta, nu, e_bullets)
    m = np.arange(m_max + 1)
    return gammaln(m + eta) - gammaln(eta) - m * np.log(denom)


def mixture_rate(eta: float, nu: float, e_bullets) -> float:
    """Common rate of the posterior mixture components."""
    e = np.asarray(e_bullets, dtype=float)
    return float(np.sum(np.log1p((nu / eta) * e)) + nu)


@dataclass(frozen=True)
class GammaMixturePosterior:
    """Posterior of Theta_0: mixture of Gamma(m + eta, rate) over m."""

    ms: np.ndarray
    log_weights: np.ndarray
    eta: float
    rate: float

    @property
    def shapes(self) -> np.ndarray:
        return self.ms + self.eta

    def mean(self) -> float:
        return float(np.sum(np.exp(self.log_weights) * self.shapes) / self.rate)

    def log_mean(self) -> float:
        w = np.exp(self.log_weights)
        return float(np.sum(w * (digamma(self.shapes) - np.log(self.rate))))

    def pdf(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        lw = self.log_weights[:, None]
        sh = self.shapes[:, None]
        comp = sh * np.log(self.rate) - gammaln(sh) + xlogy(sh - 1.0, theta[None, :]) - self.rate * theta[None, :]
        m = np.max(lw + comp, axis=0)
        return np.exp(m) * np.sum(np.exp(lw + comp - m[None, :]), axis=0)


def _posterior_from_coeffs(log_a, e_bullets, prior: HierPrior) -> GammaMixturePosterior:
    m_max = len(log_a) - 1
    log_b = gamma_ratio_coefficients(prior.eta, prior.nu, e_bullets, m_max)
    log_w = log_a + log_b
    keep = np.isfinite(log_w)
    ms = np.flatnonzero(keep)
    log_w = log_w[keep]
    log_w = log_w - _lse(log_w)
    return GammaMixturePosterior(
        ms=ms.astype(float),
        log_weights=log_w,
        eta=prior.eta,
        rate=mixture_rate(prior.eta, prior.nu, e_bullets),
    )


def posterior_theta0(y_bullets, e_bullets, prior: HierPrior) -> GammaMixturePosterior:
    """Exact mixture posterior of Theta_0 given one group's totals."""
    y = np.asarray(y_bullets, dtype=int)
    log_a = polynomial_coefficients(occupancy_vector(y))
    return _posterior_from_coeffs(log_a, e_bullets, prior)


def estep_hier(y_bullets, e_bullets, prior: HierPrior):
    """Posterior moments (E[Theta_0|y], E[log Theta_0|y], E[Theta_j|y] per j)."""
    post = posterior_theta0(y_bullets, e_bullets, prior)
    e0 = post.mean()
    elog0 = post.log_mean()
    y = np.asarray(y_bullets, dtype=float)
    e = np.asarray(e_bullets, dtype=float)
    ej = (y + e0) / (e + prior.delta)
    return e0, elog0, ej


def _group_loglik(y, e, log_a, prior: HierPrior, cell_terms: float) -> float:
    """Observed loglik of one group; cell_terms = sum_ij [y log e_ij - log y_ij!]."""
    rate = mixture_rate(prior.eta, prior.nu, e)
    m = np.arange(len(log_a), dtype=float)
    log_msum = _lse(log_a + gammaln(m + prior.eta) - m * np.log(rate))
    out = cell_terms + prior.eta * np.log(prior.nu) - gammaln(prior.eta)
    out += -float(np.sum(np.asarray(y) * np.log(prior.delta + np.asarray(e, dtype=float))))
    return out + log_msum - prior.eta * np.log(rate)


def _expected_prior_loglik(eta, nu, q, t0_mean, t0_log_mean, tj_mean) -> float:
    # Per-group Q-contribution of the (eta, nu) block; used to safeguard the
    # eta Newton step so the ECM trace stays monotone.
    delta_terms = q * (t0_mean * np.log(eta / nu) - (eta / nu) * tj_mean)
    return (
        eta * np.log(nu)
        - gammaln(eta)
        + (eta - 1.0) * t0_log_mean
        - nu * t0_mean
        + delta_terms
    )


def ecm_fit_hier(
    dataset: PortfolioDataset,
    init=None,
    eta_init=1.0,
    nu_init=1.0,
    tol=1e-9,
    max_iter=500,
) -> MixedPoissonFit:
    """ECM fit of the hierarchical Gamma model.

    Per iteration: exact E-step over groups from the mixture posterior; CM
    steps fit one offset Poisson GLM per characteristic, update nu in closed
    form, and take one Newton-Raphson step in eta (halved if it leaves the
    positive axis or would lower the expected complete loglikelihood).
    """
    panel = stack_dataset(dataset)
    q = len(CHARACTERISTICS)
    n = panel.n_groups
    betas = {}
    for char in CHARACTERISTICS:
        start = None if init is None else init.get(char)
        betas[char] = fit_poisson_arrays(panel.X[char], panel.y[char], panel.E[char], init=start).beta
    eta, nu = float(eta_init), float(nu_init)

    ysums = np.stack([panel.count_totals(c) for c in CHARACTERISTICS], axis=1)
    # a_m depends only on the counts: compute once per group.
    log_as = [polynomial_coefficients(occupancy_vector(ysums[g])) for g in range(n)]
    cell_terms = np.zeros(n)
    for char in CHARACTERISTICS:
        e_cells = panel.cell_rates(char, betas[char])
        terms = xlogy(panel.y[char], e_cells) - gammaln(panel.y[char] + 1)
        cell_terms += np.bincount(panel.gidx[char], weights=terms, minlength=n)

    trace = []
    diagnostics = {"eta_step_halved": 0}
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prior = HierPrior(eta, nu)
        e_bullets = np.stack(
            [panel.weighted_exposures(c, betas[c]) for c in CHARACTERISTICS], axis=1
        )
        ll = 0.0
        e0s = np.zeros(n)
        elog0s = np.zeros(n)
        ejs = np.zeros((n, q))
        for g in range(n):
            post = _posterior_from_coeffs(log_as[g], e_bullets[g], prior)
            e0s[g] = post.mean()
            elog0s[g] = post.log_mean()
            ejs[g] = (ysums[g] + e0s[g]) / (e_bullets[g] + prior.delta)
            ll += _group_loglik(ysums[g], e_bullets[g], log_as[g], prior, cell_terms[g])
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * (1.0 + abs(trace[-1])):
            converged = True
            break

        # CM 1: regression coefficients via offset GLMs.
        for ci, char in enumerate(CHARACTERISTICS):
            offsets = ejs[panel.gidx[char], ci] * panel.E[char]
            betas[char] = fit_poisson_arrays(
                panel.X[char], panel.y[char], offsets, init=betas[char]
            ).beta
        cell_terms = np.zeros(n)
        for char in CHARACTERISTICS:
            e_cells = panel.cell_rates(char, betas[char])
            terms = xlogy(panel.y[char], e_cells) - gammaln(panel.y[char] + 1)
            cell_terms += np.bincount(panel.gidx[char], weights=terms, minlength=n)

        # CM 2: closed-form nu given eta (positive root of the score quadratic).
        t0 = float(np.mean(e0s))
        t0_log = float(np.mean(elog0s))
        tj = float(np.mean(ejs))
        half = eta / q - t0
        nu_new = (half + np.sqrt(half * half + 4.0 * eta * t0 * tj / q)) / (2.0 * t0 / q)

        # CM 3: one Newton-Raphson step in eta at the fresh nu.
        grad = (np.log(nu_new) - digamma(eta) + t0_log) / q + t0 / eta - tj / nu_new
        hess = -polygamma(1, eta) / q - t0 / eta**2
        step = -grad / hess
        q_old = _expected_prior_loglik(eta, nu_new, q, t0, t0_log, tj)
        eta_new = eta + step
        for _ in range(60):
            if eta_new > 1e-6 and _expected_prior_loglik(
                eta_new, nu_new, q, t0, t0_log, tj
            ) >= q_old - 1e-12 * (1.0 + abs(q_old)):
                break
            step *= 0.5
            eta_new = eta + step
            diagnostics["eta_step_halved"] += 1
        else:
            eta_new = eta
        eta, nu = float(eta_new), float(nu_new)

    prior = HierPrior(eta, nu)
    e_bullets = np.stack(
        [panel.weighted_exposures(c, betas[c]) for c in CHARACTERISTICS], axis=1
    )
    posts = {}
    for g, gid in enumerate(panel.group_ids):
        _, _, ej = estep_hier(ysums[g], e_bullets[g], prior)
        posts[gid] = (float(ej[0]), float(ej[1]))
    return MixedPoissonFit(
        model="hierarchical",
        betas=betas,
        prior=prior,
        group_posteriors=posts,
        loglik=trace[-1],
        iterations=it,
        converged=converged,
        loglik_trace=trace,
        diagnostics=diagnostics,
    )
