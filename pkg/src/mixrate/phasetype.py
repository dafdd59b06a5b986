"""Bivariate phase-type mixing for mixed Poisson regression.

The mixing vector (Theta_1, Theta_2) follows a feed-forward bivariate
phase-type law: a Markov jump process starts in block 1 (sub-intensity T11,
initial row eta), jumps into block 2 through the nonnegative matrix T12
(with T11 1 = -T12 1), and is absorbed from block 2 (sub-intensity T22);
Theta_1 and Theta_2 are the sojourn times in the two blocks.

Count-side quantities (joint count density, posterior cross-moments) are
evaluated through the normalised resolvent factors (I - T/e)^{-y-1}: one LU
factorisation per margin, repeated triangular solves with running log-scale.
The naive form (eI - T)^{-y-1} with explicit factorials overflows once the
count totals reach a few hundred; the normalised form stays bounded because
every eigenvalue of (I - T/e) has real part >= 1.

The outer EM alternates posterior-mean offsets into Poisson GLMs with a
phase-type refit: the M-step target (the average posterior density of the
mixing vector) is put on a tensor Gauss-Legendre grid and a weighted EM for
bivariate phase-type distributions is applied a few ascent steps.  The inner
E-step needs integrals int_0^x exp(T(x-u)) A exp(Tu) du, evaluated exactly as
the upper-right block of exp([[T, A], [0, T]] x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm, lu_factor, lu_solve
from scipy.special import gammaln, logsumexp, xlogy

from .core import CHARACTERISTICS, MixedPoissonFit, PortfolioDataset, stack_dataset
from .glm import fit_poisson_arrays


class NumericalBreakdownError(RuntimeError):
    """A matrix expression that is positive analytically came out nonpositive."""


class GridTooCoarseError(RuntimeError):
    """The quadrature grid cannot resolve the posterior target density."""


def matrix_exponential(M) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring (Pade kernel)."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix must be finite")
    return expm(M)


def _check_sub_intensity(T, name):
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.any(np.diag(T) >= 0):
        raise ValueError(f"{name} needs a strictly negative diagonal")
    off = T - np.diag(np.diag(T))
    if np.any(off < -1e-12):
        raise ValueError(f"{name} needs nonnegative off-diagonal entries")
    if np.any(T.sum(axis=1) > 1e-10):
        raise ValueError(f"{name} row sums must be <= 0")
    return T


@dataclass(frozen=True)
class UnivariatePH:
    """Phase-type distribution with representation (pi, T)."""

    pi: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        T = _check_sub_intensity(self.T, "T")
        if pi.shape != (T.shape[0],) or np.any(pi < -1e-12) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValueError("pi must be a probability row vector matching T")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "T", T)

    @property
    def exit_rates(self) -> np.ndarray:
        return -self.T @ np.ones(self.T.shape[0])

    def mean(self) -> float:
        return float(self.pi @ np.linalg.solve(-self.T, np.ones(self.T.shape[0])))


def ph_density(ph: UnivariatePH, theta) -> np.ndarray:
    """f(theta) = pi exp(T theta) t for theta > 0."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    t = ph.exit_rates
    out = np.array([float(ph.pi @ expm(ph.T * x) @ t) for x in theta])
    return out if out.size > 1 else float(out[0])


def ph_survival(ph: UnivariatePH, theta: float) -> float:
    return float(ph.pi @ expm(ph.T * theta) @ np.ones(ph.T.shape[0]))


def ph_laplace(ph: UnivariatePH, u: float) -> float:
    """L(u) = pi (uI - T)^{-1} t, via one linear solve."""
    if u < 0:
        raise ValueError("u must be >= 0")
    p = ph.T.shape[0]
    return float(ph.pi @ np.linalg.solve(u * np.eye(p) - ph.T, ph.exit_rates))


def ph_quantile_bound(ph: UnivariatePH, tail: float = 1e-8) -> float:
    """Smallest convenient x with survival(x) <= tail (doubling + bisection)."""
    x = max(ph.mean(), 1e-6)
    for _ in range(200):
        if ph_survival(ph, x) <= tail:
            break
        x *= 2.0
    lo, hi = x / 2.0, x
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        if ph_survival(ph, mid) <= tail:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class BivariatePH:
    """Feed-forward bivariate phase-type representation (eta, T11, T12, T22)."""

    eta: np.ndarray
    T11: np.ndarray
    T12: np.ndarray
    T22: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        T11 = _check_sub_intensity(self.T11, "T11")
        T22 = _check_sub_intensity(self.T22, "T22")
        T12 = np.asarray(self.T12, dtype=float)
        p1, p2 = T11.shape[0], T22.shape[0]
        if T12.shape != (p1, p2) or np.any(T12 < -1e-12):
            raise ValueError("T12 must be nonnegative with shape (p1, p2)")
        if eta.shape != (p1,) or np.any(eta < -1e-12) or abs(eta.sum() - 1.0) > 1e-9:
            raise ValueError("eta must be a probability row vector of length p1")
        if np.max(np.abs(T11 @ np.ones(p1) + T12 @ np.ones(p2))) > 1e-8:
            raise ValueError("feed-forward constraint T11 1 = -T12 1 violated")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "T11", T11)
        object.__setattr__(self, "T12", T12)
        object.__setattr__(self, "T22", T22)

    @property
    def dims(self):
        return (self.T11.shape[0], self.T22.shape[0])

    @property
    def exit_rates(self) -> np.ndarray:
        return -self.T22 @ np.ones(self.T22.shape[0])

    def first_margin(self) -> UnivariatePH:
        return UnivariatePH(self.eta, self.T11)

    def second_margin(self) -> UnivariatePH:
        start = self.eta @ np.linalg.solve(-self.T11, self.T12)
        return UnivariatePH(start / start.sum(), self.T22)


def bivph_density(b: BivariatePH, theta1: float, theta2: float) -> float:
    """f(t1, t2) = eta exp(T11 t1) T12 exp(T22 t2) (-T22) 1."""
    val = b.eta @ expm(b.T11 * theta1) @ b.T12 @ expm(b.T22 * theta2) @ b.exit_rates
    return float(val)


def bivph_joint_laplace(b: BivariatePH, u1: float, u2: float) -> float:
    """eta (u1 I - T11)^{-1} T12 (u2 I - T22)^{-1} (-T22) 1, via two solves."""
    if u1 < 0 or u2 < 0:
        raise ValueError("u1, u2 must be >= 0")
    p1, p2 = b.dims
    right = np.linalg.solve(u2 * np.eye(p2) - b.T22, b.exit_rates)
    left = np.linalg.solve((u1 * np.eye(p1) - b.T11).T, b.eta)
    return float(left @ b.T12 @ right)


# ---------------------------------------------------------------------------
# Stable count-side kernels
# ---------------------------------------------------------------------------


def _margin_factor(T, e):
    """LU factors of the margin matrix: (I - T/e) for e > 0, else (-T)."""
    p = T.shape[0]
    if e > 0:
        return lu_factor(np.eye(p) - T / e)
    return lu_factor(-T)


def _scaled_solves(lu, v0, counts, trans=0):
    """v0 pushed through n solves for each n in ``counts`` (log-rescaled).

    Returns {n: (vector, log_scale)}; the running rescale keeps iterates at
    unit max-norm so arbitrarily many solves stay inside double range.
    """
    out = {}
    v = np.array(v0, dtype=float)
    scale = 0.0
    top = max(counts)
    counts = set(counts)
    if 0 in counts:
        out[0] = (v.copy(), scale)
    for n in range(1, top + 1):
        v = lu_solve(lu, v, trans=trans)
        m = np.max(np.abs(v))
        if m == 0 or not np.isfinite(m):
            raise NumericalBreakdownError("resolvent solve collapsed")
        v /= m
        scale += np.log(m)
        if n in counts:
            out[n] = (v.copy(), scale)
    return out


def _chain_logs(b: BivariatePH, y1, y2, e1, e2, orders=((0, 0),)):
    """log of eta M1^{-y1-k-1} T12 M2^{-y2-s-1} t2 for each (k, s) order.

    M_j = I - T_jj/e_j when e_j > 0; a margin with e_j = 0 (then y_j = 0)
    degenerates to the analytic limit with factor (-T_jj)^{-k-1}.
    """
    y1, y2 = int(y1), int(y2)
    if (e1 == 0 and y1 > 0) or (e2 == 0 and y2 > 0):
        raise ValueError("zero exposure with positive count is inconsistent")
    ks = sorted({k for k, _ in orders})
    ss = sorted({s for _, s in orders})
    lu1 = _margin_factor(b.T11, e1)
    lu2 = _margin_factor(b.T22, e2)
    n1 = {k: (y1 + k + 1 if e1 > 0 else k + 1) for k in ks}
    n2 = {s: (y2 + s + 1 if e2 > 0 else s + 1) for s in ss}
    lefts = _scaled_solves(lu1, b.eta, sorted(set(n1.values())), trans=1)
    rights = _scaled_solves(lu2, b.exit_rates, sorted(set(n2.values())))
    out = {}
    for k, s in orders:
        u, su = lefts[n1[k]]
        v, sv = rights[n2[s]]
        val = float(u @ b.T12 @ v)
        if val <= 0:
            raise NumericalBreakdownError(
                f"matrix chain nonpositive at (y1={y1}, y2={y2}, k={k}, s={s})"
            )
        out[(k, s)] = np.log(val) + su + sv
    return out


def log_joint_count_density(b: BivariatePH, y_bullets, e_bullets, log_prefactor=0.0) -> float:
    """log f_Y(y) for one group from its totals, fully in log space.

    ``log_prefactor`` carries the cell-level part
    sum_j sum_i [y_ij log e_ij - log y_ij!]; the remaining terms
    sum_j [log y_j! - (y_j + 1) log e_j] and the normalised matrix chain are
    added here.  A margin with zero exposure (hence zero count) contributes
    through its analytic limit.
    """
    y1, y2 = (int(v) for v in y_bullets)
    e1, e2 = (float(v) for v in e_bullets)
    total = float(log_prefactor)
    for y, e in ((y1, e1), (y2, e2)):
        if e > 0:
            total += gammaln(y + 1) - (y + 1) * np.log(e)
    return total + _chain_logs(b, y1, y2, e1, e2)[(0, 0)]


def posterior_cross_moment(b: BivariatePH, y_bullets, e_bullets, k: int = 1, s: int = 0) -> float:
    """E(Theta_1^k Theta_2^s | Y = y) through the normalised chain ratio."""
    if k < 0 or s < 0:
        raise ValueError("moment orders must be nonnegative integers")
    if k == 0 and s == 0:
        return 1.0
    y1, y2 = (int(v) for v in y_bullets)
    e1, e2 = (float(v) for v in e_bullets)
    logs = _chain_logs(b, y1, y2, e1, e2, orders=((0, 0), (k, s)))
    log_m = logs[(k, s)] - logs[(0, 0)]
    if e1 > 0:
        log_m += gammaln(y1 + k + 1) - gammaln(y1 + 1) - k * np.log(e1)
    else:
        log_m += gammaln(k + 1)
    if e2 > 0:
        log_m += gammaln(y2 + s + 1) - gammaln(y2 + 1) - s * np.log(e2)
    else:
        log_m += gammaln(s + 1)
    return float(np.exp(log_m))


def _log_count_weight(y, e, theta):
    """log of the margin factor e * exp(y log(theta e) - log y! - theta e)."""
    if e == 0:
        return np.zeros_like(np.asarray(theta, dtype=float))
    theta = np.asarray(theta, dtype=float)
    return xlogy(y, theta * e) - gammaln(y + 1) - theta * e + np.log(e)


def posterior_log_density(b: BivariatePH, y_bullets, e_bullets, theta1, theta2) -> float:
    """log f_{Theta|Y}(theta | y) assembled entirely in log space."""
    y1, y2 = (int(v) for v in y_bullets)
    e1, e2 = (float(v) for v in e_bullets)
    log_chain = _chain_logs(b, y1, y2, e1, e2)[(0, 0)]
    prior = bivph_density(b, float(theta1), float(theta2))
    if prior <= 0:
        raise NumericalBreakdownError("prior density nonpositive at requested point")
    lp = float(_log_count_weight(y1, e1, theta1)) + float(_log_count_weight(y2, e2, theta2))
    return lp + np.log(prior) - log_chain


# ---------------------------------------------------------------------------
# M-step target on a quadrature grid and the weighted inner EM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedSample2D:
    """Positive nodes with normalized nonnegative weights."""

    theta1: np.ndarray
    theta2: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        t1 = np.asarray(self.theta1, dtype=float)
        t2 = np.asarray(self.theta2, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if not (t1.shape == t2.shape == w.shape):
            raise ValueError("nodes and weights must be aligned")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-8:
            raise ValueError("weights must be nonnegative and sum to one")
        if np.any(t1 <= 0) or np.any(t2 <= 0):
            raise ValueError("nodes must be strictly positive")
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", t2)
        object.__setattr__(self, "weights", w)

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def _eig_basis(T):
    """Eigenbasis (lam, V, Vinv) of T, or None when too ill-conditioned."""
    lam, V = np.linalg.eig(T)
    try:
        Vi = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(V)) or np.linalg.cond(V) > 1e8:
        return None
    if np.max(np.abs((V * lam) @ Vi - T)) > 1e-9 * (1.0 + np.max(np.abs(T))):
        return None
    return lam, V, Vi


def _expm_action_rows(T, xs, row):
    """Rows row @ exp(T x) for every x in xs (eigen fast path, expm fallback)."""
    basis = _eig_basis(T)
    if basis is None:
        return np.array([row @ expm(T * x) for x in xs])
    lam, V, Vi = basis
    E = np.exp(np.multiply.outer(np.asarray(xs, dtype=float), lam))
    return np.real(((row @ V)[None, :] * E) @ Vi)


def _expm_action_cols(T, xs, col):
    """Columns exp(T x) @ col for every x in xs."""
    basis = _eig_basis(T)
    if basis is None:
        return np.array([expm(T * x) @ col for x in xs])
    lam, V, Vi = basis
    E = np.exp(np.multiply.outer(np.asarray(xs, dtype=float), lam))
    return np.real((E * (Vi @ col)[None, :]) @ V.T)


def _grid_rows(b: BivariatePH, nodes1, nodes2):
    """eta exp(T11 x) rows and exp(T22 y) t2 columns for the given nodes."""
    A = _expm_action_rows(b.T11, nodes1, b.eta)
    V = _expm_action_cols(b.T22, nodes2, b.exit_rates)
    return A, V


def build_posterior_target(
    b: BivariatePH,
    y_bullets,
    e_bullets,
    n_nodes: int = 64,
    tail: float = 1e-8,
    min_ess: float = 10.0,
    log_chains=None,
) -> WeightedSample2D:
    """Average posterior of the mixing vector on a Gauss-Legendre grid.

    ``y_bullets`` and ``e_bullets`` are (N, 2) group totals.  The grid spans
    [0, Q]^2 where Q makes both phase-type margins cover all but ``tail``
    mass; node weights are quadrature weights times the across-group average
    posterior density, renormalised.  ``log_chains`` may pass per-group
    normalising chain logs already computed for the same parameters.  Raises
    :class:`GridTooCoarseError` when the effective sample size of the weights
    drops below ``min_ess``.
    """
    y_bullets = np.asarray(y_bullets, dtype=float)
    e_bullets = np.asarray(e_bullets, dtype=float)
    n = y_bullets.shape[0]
    Q = max(
        ph_quantile_bound(b.first_margin(), tail),
        ph_quantile_bound(b.second_margin(), tail),
    )
    x, wx = np.polynomial.legendre.leggauss(n_nodes)
    nodes = 0.5 * Q * (x + 1.0)
    glw = 0.5 * Q * wx
    A, V = _grid_rows(b, nodes, nodes)
    prior_grid = (A @ b.T12) @ V.T
    if np.any(prior_grid <= 0):
        raise NumericalBreakdownError("prior density nonpositive on quadrature grid")

    dens = np.zeros((n_nodes, n_nodes))
    for g in range(n):
        y1, y2 = int(y_bullets[g, 0]), int(y_bullets[g, 1])
        e1, e2 = float(e_bullets[g, 0]), float(e_bullets[g, 1])
        if log_chains is not None:
            log_chain = log_chains[g]
        else:
            log_chain = _chain_logs(b, y1, y2, e1, e2)[(0, 0)]
        lw1 = _log_count_weight(y1, e1, nodes) - log_chain
        lw2 = _log_count_weight(y2, e2, nodes)
        dens += np.exp(lw1)[:, None] * np.exp(lw2)[None, :]
    dens *= prior_grid / n

    w = (glw[:, None] * glw[None, :]) * dens
    total = w.sum()
    if total <= 0:
        raise GridTooCoarseError("target density vanished on the grid")
    w = (w / total).ravel()
    sample = WeightedSample2D(
        theta1=np.repeat(nodes, n_nodes),
        theta2=np.tile(nodes, n_nodes),
        weights=w,
    )
    if sample.ess() < min_ess:
        raise GridTooCoarseError(
            f"effective sample size {sample.ess():.2f} < {min_ess}; refine the grid"
        )
    return sample


def _van_loan_blocks(T, A, x):
    """(exp(Tx), int_0^x exp(T(x-u)) A exp(Tu) du) via one block exponential."""
    p = T.shape[0]
    blk = np.zeros((2 * p, 2 * p))
    blk[:p, :p] = T
    blk[:p, p:] = A
    blk[p:, p:] = T
    F = expm(blk * x)
    return F[:p, :p], F[:p, p:]


def _coupling_phi(lam, xs):
    """phi[i, k, l] = int_0^{x_i} exp(lam_k (x-u)) exp(lam_l u) du.

    Stable for coinciding eigenvalues through x e^{(a+b)x/2} sinch((a-b)x/2).
    """
    xs = np.asarray(xs, dtype=float)
    s = 0.5 * np.add.outer(lam, lam)
    d = 0.5 * np.subtract.outer(lam, lam)
    Z = xs[:, None, None] * d[None, :, :]
    small = np.abs(Z) < 0.5
    Zs = np.where(small, 1.0, Z)
    sinch = np.where(small, 1.0 + Z**2 / 6.0 + Z**4 / 120.0, np.sinh(Zs) / Zs)
    return xs[:, None, None] * np.exp(xs[:, None, None] * s[None, :, :]) * sinch


def _coupled_stats(T, xs, lefts, rights, propagate):
    """Summed Van Loan statistics over nodes.

    Returns (M, vec): M = sum_i int_0^{x_i} exp(T(x_i-u)) lefts_i rights_i^T
    exp(Tu) du, and vec = sum_i exp(T x_i) lefts_i (``propagate='left'``) or
    sum_i rights_i exp(T x_i) (``propagate='right'``).  Uses the eigenbasis
    when available, one block exponential per node otherwise.
    """
    xs = np.asarray(xs, dtype=float)
    lefts = np.asarray(lefts, dtype=float)
    rights = np.asarray(rights, dtype=float)
    basis = _eig_basis(T)
    if basis is not None:
        lam, V, Vi = basis
        if np.max(np.abs(np.subtract.outer(lam, lam))) * np.max(xs, initial=0.0) < 1200.0:
            Lhat = lefts @ Vi.T
            Rhat = rights @ V
            phi = _coupling_phi(lam, xs)
            inner = np.einsum("ik,il,ikl->kl", Lhat, Rhat, phi)
            M = np.real(V @ inner @ Vi)
            E = np.exp(np.multiply.outer(xs, lam))
            if propagate == "left":
                vec = np.real(V @ np.sum(E * Lhat, axis=0))
            else:
                vec = np.real(np.sum(Rhat * E, axis=0) @ Vi)
            return M, vec
    p = T.shape[0]
    M = np.zeros((p, p))
    vec = np.zeros(p)
    for i, x in enumerate(xs):
        top, integral = _van_loan_blocks(T, np.outer(lefts[i], rights[i]), x)
        M += integral
        vec += top @ lefts[i] if propagate == "left" else rights[i] @ top
    return M, vec


def weighted_bivph_em_step(b: BivariatePH, sample: WeightedSample2D) -> BivariatePH:
    """One EM step for a feed-forward bivariate PH on weighted data.

    Expected initial counts, occupation times and jump counts are accumulated
    over nodes; the convolution integrals behind the occupation/jump
    statistics reduce, by linearity in the opposing margin, to one Van Loan
    block exponential per distinct node coordinate.  States whose expected
    occupation time vanishes keep their previous rates.
    """
    p1, p2 = b.dims
    t2 = b.exit_rates
    u1, inv1 = np.unique(sample.theta1, return_inverse=True)
    u2, inv2 = np.unique(sample.theta2, return_inverse=True)
    A, V = _grid_rows(b, u1, u2)
    f_nodes = np.sum((A @ b.T12)[inv1] * V[inv2], axis=1)
    if np.any(f_nodes <= 0):
        raise NumericalBreakdownError("model density nonpositive at sample nodes")
    wt = sample.weights / f_nodes

    # Opposing-margin aggregates per distinct coordinate.
    G = np.zeros((len(u1), p2))
    np.add.at(G, inv1, wt[:, None] * V[inv2])
    H = np.zeros((len(u2), p1))
    np.add.at(H, inv2, wt[:, None] * A[inv1])
    Wt = np.zeros((len(u1), len(u2)))
    np.add.at(Wt, (inv1, inv2), wt)

    M1, Evec1 = _coupled_stats(b.T11, u1, G @ b.T12.T, np.broadcast_to(b.eta, (len(u1), p1)), "left")
    M2, Evec2 = _coupled_stats(b.T22, u2, np.broadcast_to(t2, (len(u2), p2)), H @ b.T12, "right")

    # All statistics below are expectations of counts/times, nonnegative
    # analytically; clip the roundoff noise of the eigen path at zero.
    start = np.maximum(b.eta * Evec1, 0.0)     # expected initial-state counts
    z1 = np.maximum(np.diag(M1), 0.0)          # occupation times, block 1
    n11 = np.maximum(b.T11 * M1.T, 0.0)        # jumps within block 1
    n12 = np.maximum(b.T12 * (A.T @ Wt @ V), 0.0)  # jumps across blocks
    z2 = np.maximum(np.diag(M2), 0.0)          # occupation times, block 2
    n22 = np.maximum(b.T22 * M2.T, 0.0)        # jumps within block 2
    n2abs = np.maximum(t2 * Evec2, 0.0)        # absorptions

    eta_new = start / start.sum()
    T11_new = b.T11.copy()
    T12_new = b.T12.copy()
    held = []
    for k in range(p1):
        if z1[k] <= 1e-300:
            held.append(("block1", k))
            continue
        row11 = n11[k] / z1[k]
        row12 = n12[k] / z1[k]
        row11[k] = 0.0
        T11_new[k] = row11
        T12_new[k] = row12
        T11_new[k, k] = -(row11.sum() + row12.sum())
    T22_new = b.T22.copy()
    for m in range(p2):
        if z2[m] <= 1e-300:
            held.append(("block2", m))
            continue
        row22 = n22[m] / z2[m]
        row22[m] = 0.0
        exit_rate = n2abs[m] / z2[m]
        T22_new[m] = row22
        T22_new[m, m] = -(row22.sum() + exit_rate)
    new = BivariatePH(eta_new, T11_new, T12_new, T22_new)
    if held:
        object.__setattr__(new, "_held_states", held)
    return new


def weighted_loglik(b: BivariatePH, sample: WeightedSample2D) -> float:
    """sum_nodes w log f_Theta(node); the inner EM ascends this."""
    u1, inv1 = np.unique(sample.theta1, return_inverse=True)
    u2, inv2 = np.unique(sample.theta2, return_inverse=True)
    A, V = _grid_rows(b, u1, u2)
    f = np.sum((A @ b.T12)[inv1] * V[inv2], axis=1)
    return float(np.sum(xlogy(sample.weights, f)))


# ---------------------------------------------------------------------------
# Outer EM: phase-type mixed Poisson regression
# ---------------------------------------------------------------------------


def _random_sub_intensity(p: int, rng) -> np.ndarray:
    """Random sub-intensity with diagonal -(1..p); half of each row exits."""
    T = np.zeros((p, p))
    off = rng.uniform(0.2, 1.0, size=(p, p))
    np.fill_diagonal(off, 0.0)
    for k in range(p):
        total = k + 1.0
        row = off[k]
        if p > 1:
            row = row / row.sum() * (0.5 * total)
        T[k] = row
        T[k, k] = -total
    return T


def random_bivph(p1: int, p2: int, rng) -> BivariatePH:
    """Random feed-forward representation with both margins scaled to mean 1."""
    eta = np.full(p1, 1.0 / p1)
    T11 = _random_sub_intensity(p1, rng)
    m1 = UnivariatePH(eta, T11).mean()
    T11 = T11 * m1
    t1 = -T11 @ np.ones(p1)
    T12 = np.outer(t1, np.full(p2, 1.0 / p2))
    T22 = _random_sub_intensity(p2, rng)
    start = eta @ np.linalg.solve(-T11, T12)
    m2 = UnivariatePH(start / start.sum(), T22).mean()
    T22 = T22 * m2
    return BivariatePH(eta, T11, T12, T22)


def em_fit_bivph_mixed_poisson(
    dataset: PortfolioDataset,
    dims=(3, 3),
    init=None,
    init_bivph: BivariatePH | None = None,
    inner_steps: int = 3,
    n_nodes: int = 64,
    seed: int = 0,
    tol: float = 1e-7,
    max_outer: int = 200,
    quad_tol: float = 1e-4,
) -> MixedPoissonFit:
    """Outer EM for the bivariate phase-type mixed Poisson regression.

    Each outer iteration computes per-group posterior means of the mixing
    vector (two normalised chain ratios), refits the two offset Poisson
    regressions, and takes ``inner_steps`` weighted EM steps towards the
    grid target density.  The observed loglikelihood is tracked every
    iteration; a decrease beyond the quadrature tolerance stops the loop
    with diagnostics (the grid is too coarse), returning the best iterate.
    """
    panel = stack_dataset(dataset)
    n = panel.n_groups
    rng = np.random.default_rng(seed)
    betas = {}
    for char in CHARACTERISTICS:
        start = None if init is None else init.get(char)
        betas[char] = fit_poisson_arrays(panel.X[char], panel.y[char], panel.E[char], init=start).beta
    b = init_bivph if init_bivph is not None else random_bivph(dims[0], dims[1], rng)

    ysum = np.stack([panel.count_totals(c) for c in CHARACTERISTICS], axis=1).astype(float)

    def cell_terms(bs):
        out = np.zeros(n)
        for char in CHARACTERISTICS:
            e_cells = panel.cell_rates(char, bs[char])
            terms = xlogy(panel.y[char], e_cells) - gammaln(panel.y[char] + 1)
            out += np.bincount(panel.gidx[char], weights=terms, minlength=n)
        return out

    trace = []
    diagnostics = {}
    converged = False
    best = (-np.inf, b, dict(betas))
    it = 0
    for it in range(1, max_outer + 1):
        e_bullets = np.stack(
            [panel.weighted_exposures(c, betas[c]) for c in CHARACTERISTICS], axis=1
        )
        pref = cell_terms(betas)
        ll = 0.0
        mom = np.zeros((n, 2))
        chain0 = np.zeros(n)
        for g in range(n):
            logs = _chain_logs(
                b, ysum[g, 0], ysum[g, 1], e_bullets[g, 0], e_bullets[g, 1],
                orders=((0, 0), (1, 0), (0, 1)),
            )
            chain0[g] = logs[(0, 0)]
            ll_g = pref[g] + chain0[g]
            for ci in range(2):
                y, e = ysum[g, ci], e_bullets[g, ci]
                if e > 0:
                    ll_g += gammaln(y + 1) - (y + 1) * np.log(e)
            ll += ll_g
            for ci, order in enumerate(((1, 0), (0, 1))):
                log_m = logs[order] - logs[(0, 0)]
                y, e = ysum[g, ci], e_bullets[g, ci]
                if e > 0:
                    log_m += np.log(y + 1.0) - np.log(e)
                mom[g, ci] = np.exp(log_m)
        trace.append(ll)
        if ll > best[0]:
            best = (ll, b, {c: betas[c].copy() for c in CHARACTERISTICS})
        if len(trace) > 1:
            if abs(trace[-1] - trace[-2]) <= tol * (1.0 + abs(trace[-1])):
                converged = True
                break
            if trace[-1] < trace[-2] - quad_tol * (1.0 + abs(trace[-2])):
                diagnostics["aborted"] = (
                    f"loglik decreased beyond quadrature tolerance at iteration {it}"
                )
                break

        for ci, char in enumerate(CHARACTERISTICS):
            offsets = mom[panel.gidx[char], ci] * panel.E[char]
            betas[char] = fit_poisson_arrays(
                panel.X[char], panel.y[char], offsets, init=betas[char]
            ).beta

        target = build_posterior_target(b, ysum, e_bullets, n_nodes=n_nodes, log_chains=chain0)
        for _ in range(inner_steps):
            b = weighted_bivph_em_step(b, target)

    if diagnostics.get("aborted"):
        _, b, betas = best
    e_bullets = np.stack(
        [panel.weighted_exposures(c, betas[c]) for c in CHARACTERISTICS], axis=1
    )
    posts = {}
    for g, gid in enumerate(panel.group_ids):
        posts[gid] = (
            posterior_cross_moment(b, ysum[g], e_bullets[g], 1, 0),
            posterior_cross_moment(b, ysum[g], e_bullets[g], 0, 1),
        )
    diagnostics["seed"] = seed
    return MixedPoissonFit(
        model="phasetype",
        betas=betas,
        prior=b,
        group_posteriors=posts,
        loglik=trace[-1] if not diagnostics.get("aborted") else best[0],
        iterations=it,
        converged=converged,
        loglik_trace=trace,
        diagnostics=diagnostics,
    )
