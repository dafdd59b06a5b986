"""End-to-end study harness: simulate, fit all models, price, and score.

`run_scenario` drives the whole comparison: the portfolio frame (sizes,
ages, effects) is fixed once per case from the master seed, paths are
re-simulated per replication, all applicable models are fitted (the
hierarchical model is skipped in Case C, where its positive-correlation
structure has nothing to capture), premiums are recomputed from each fit and
scored against the true-parameter premiums.  Outputs are plain CSV tables
plus, optionally, rendered figures; identical (config, seed) pairs produce
byte-identical CSVs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from .core import CHARACTERISTICS, MixedPoissonFit, PortfolioDataset, stack_dataset
from .gamma_mix import GammaPrior, em_fit_independent_gamma
from .glm import fit_fixed_effects, fit_standard
from .hier_mix import HierPrior, ecm_fit_hier
from .phasetype import BivariatePH, em_fit_bivph_mixed_poisson
from .simulate import (
    CASE_IDS,
    TRUE_BETAS,
    PortfolioFrame,
    ScenarioConfig,
    build_frame,
    mortality_rate_active,
    mortality_rate_disabled,
    simulate_paths_dataset,
)
from .thiele import portfolio_premiums

ALL_MODELS = ("standard", "fixed", "simple", "hierarchical", "phasetype")
DEFAULT_P_DIMS = {"A": (3, 3), "B": (6, 6), "C": (6, 6)}
MORTALITY = {"ad": mortality_rate_active, "id": mortality_rate_disabled}


@dataclass
class StudyConfig:
    """Resolved configuration of one study run (desk scale by default)."""

    seed: int = 0
    cases: tuple = ("A", "B", "C")
    models: tuple = ALL_MODELS
    replications: int = 10
    n_groups: int = 100
    total_insured: int = 5000
    coverage_years: float = 3.0
    terminal_age: float = 67.0
    interest_rate: float = 0.01
    step: float = 1.0 / 12.0
    aggregate: str = "insured"
    p_dims: dict = field(default_factory=lambda: dict(DEFAULT_P_DIMS))
    inner_steps: int = 3
    n_nodes: int = 64
    max_em_iter: int = 500
    max_outer_iter: int = 150

    def __post_init__(self):
        if self.aggregate not in ("insured", "group"):
            raise ValueError("aggregate must be 'insured' or 'group'")
        bad = [m for m in self.models if m not in ALL_MODELS]
        if bad:
            raise ValueError(f"unknown models: {bad}")
        bad = [c for c in self.cases if c not in CASE_IDS]
        if bad:
            raise ValueError(f"unknown cases: {bad}")

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, dict):
                v = {k: (list(x) if isinstance(x, tuple) else x) for k, x in v.items()}
            out[f.name] = v
        return out


def models_for_case(case: str, models) -> tuple:
    """Case C drops the hierarchical model (positive correlation only)."""
    if case == "C":
        return tuple(m for m in models if m != "hierarchical")
    return tuple(models)


@dataclass
class StudyReport:
    config: StudyConfig
    loglik_rows: list = field(default_factory=list)      # (case, model, rep, loglik)
    error_rows: list = field(default_factory=list)       # (case, model, rep, rmse, mae)
    effects_rows: list = field(default_factory=list)     # (case, model, gid, 4 floats)
    fits: dict = field(default_factory=dict)             # (case, model) -> rep-0 fit
    failures: list = field(default_factory=list)         # (case, model, rep, message)
    frames: dict = field(default_factory=dict)           # case -> PortfolioFrame


def scaled_group_effect(theta_hat, beta_hat, beta_true, exposures, t_values) -> float:
    """Identifiability-corrected effect estimate for scatter comparisons.

    Multiplies theta_hat by the ratio of fitted to true rate mass over the
    group's own exposure profile; exact when beta_hat equals beta_true, and
    turns an intercept shift log c into the factor c.  Returns NaN when the
    group has no exposure for the characteristic.
    """
    E = np.asarray(exposures, dtype=float)
    t = np.asarray(t_values, dtype=float)
    if E.size == 0 or np.sum(E) == 0:
        return float("nan")
    bh = np.asarray(beta_hat, dtype=float)
    bt = np.asarray(beta_true, dtype=float)
    num = float(np.sum(E * np.exp(np.sum([b * t**m for m, b in enumerate(bh)], axis=0))))
    den = float(np.sum(E * np.exp(np.sum([b * t**m for m, b in enumerate(bt)], axis=0))))
    if den == 0:
        return float("nan")
    return float(theta_hat) * num / den


def compute_metrics(true_premiums, model_premiums, group_index=None, aggregate="insured"):
    """(RMSE, MAE) of model vs true premiums, reported in hundredths.

    ``aggregate='group'`` sums premiums within groups (via ``group_index``)
    before taking errors.
    """
    p_true = np.asarray(true_premiums, dtype=float)
    p_model = np.asarray(model_premiums, dtype=float)
    if p_true.size == 0:
        raise ValueError("empty premium table")
    if aggregate == "group":
        if group_index is None:
            raise ValueError("group aggregation needs a group index")
        gi = np.asarray(group_index)
        p_true = np.bincount(gi, weights=p_true)
        p_model = np.bincount(gi, weights=p_model)
    err = p_model - p_true
    return 100.0 * float(np.sqrt(np.mean(err**2))), 100.0 * float(np.mean(np.abs(err)))


def _fit_model(model, dataset, config: StudyConfig, case, replication):
    if model == "standard":
        return fit_standard(dataset)
    if model == "fixed":
        return fit_fixed_effects(dataset)
    if model == "simple":
        return em_fit_independent_gamma(dataset, max_iter=config.max_em_iter)
    if model == "hierarchical":
        return ecm_fit_hier(dataset, max_iter=config.max_em_iter)
    if model == "phasetype":
        seed = config.seed * 1_000_003 + CASE_IDS[case] * 101 + replication
        return em_fit_bivph_mixed_poisson(
            dataset,
            dims=tuple(config.p_dims.get(case, (3, 3))),
            inner_steps=config.inner_steps,
            n_nodes=config.n_nodes,
            seed=seed,
            max_outer=config.max_outer_iter,
        )
    raise ValueError(f"unknown model {model}")


def _effect_table(fit: MixedPoissonFit, group_ids) -> np.ndarray:
    return np.array([fit.group_posteriors[gid] for gid in group_ids], dtype=float)


def _premium_errors(frame: PortfolioFrame, fit, true_premiums, config: StudyConfig):
    effects = _effect_table(fit, frame.group_ids)
    prem = portfolio_premiums(
        frame.entry_ages, effects, fit.betas, MORTALITY,
        interest=config.interest_rate, coverage=config.coverage_years,
        terminal_age=config.terminal_age, step=config.step,
    )
    model_flat = np.concatenate(prem)
    true_flat = np.concatenate(true_premiums)
    gidx = np.concatenate(
        [np.full(len(a), g, dtype=int) for g, a in enumerate(frame.entry_ages)]
    )
    return compute_metrics(true_flat, model_flat, gidx, aggregate=config.aggregate)


def _scaled_effect_rows(case, model, fit, frame: PortfolioFrame, dataset: PortfolioDataset):
    panel = stack_dataset(dataset)
    rows = []
    ex = {}
    for char in CHARACTERISTICS:
        E, X, gidx = panel.E[char], panel.X[char], panel.gidx[char]
        ex[char] = [(E[gidx == g], X[gidx == g, 1] if X.shape[1] > 1 else np.zeros(0))
                    for g in range(panel.n_groups)]
    theta = _effect_table(fit, frame.group_ids)
    for g, gid in enumerate(frame.group_ids):
        scaled = []
        for ci, char in enumerate(CHARACTERISTICS):
            E, t = ex[char][g]
            scaled.append(
                scaled_group_effect(theta[g, ci], fit.betas[char], TRUE_BETAS[char], E, t)
            )
        rows.append(
            (case, model, gid,
             float(frame.effects[g, 0]), scaled[0],
             float(frame.effects[g, 1]), scaled[1])
        )
    return rows


def run_scenario(config: StudyConfig) -> StudyReport:
    """Run the full study: per case and replication, fit, price and score."""
    report = StudyReport(config=config)
    for case in config.cases:
        scen = ScenarioConfig(
            case=case, seed=config.seed, n_groups=config.n_groups,
            total_insured=config.total_insured, coverage_years=config.coverage_years,
            terminal_age=config.terminal_age,
        )
        frame = build_frame(scen)
        report.frames[case] = frame
        true_premiums = portfolio_premiums(
            frame.entry_ages, frame.effects, TRUE_BETAS, MORTALITY,
            interest=config.interest_rate, coverage=config.coverage_years,
            terminal_age=config.terminal_age, step=config.step,
        )
        for rep in range(config.replications):
            dataset = simulate_paths_dataset(frame, rep)
            for model in models_for_case(case, config.models):
                try:
                    fit = _fit_model(model, dataset, config, case, rep)
                    rmse, mae = _premium_errors(frame, fit, true_premiums, config)
                except Exception as exc:  # record and continue with other fits
                    report.failures.append((case, model, rep, f"{type(exc).__name__}: {exc}"))
                    continue
                report.loglik_rows.append((case, model, rep, fit.loglik))
                report.error_rows.append((case, model, rep, rmse, mae))
                if rep == 0:
                    report.fits[(case, model)] = fit
                    report.effects_rows.extend(
                        _scaled_effect_rows(case, model, fit, frame, dataset)
                    )
    return report


# ---------------------------------------------------------------------------
# Fit serialization
# ---------------------------------------------------------------------------


def fit_to_dict(fit: MixedPoissonFit) -> dict:
    out = {
        "model": fit.model,
        "beta_ai": [float(v) for v in fit.betas["ai"]],
        "beta_ia": [float(v) for v in fit.betas["ia"]],
        "loglik": float(fit.loglik),
        "group_posteriors": {
            gid: [float(a), float(b)] for gid, (a, b) in fit.group_posteriors.items()
        },
    }
    if fit.model == "simple":
        out["psi_ai"] = float(fit.prior.psi_ai)
        out["psi_ia"] = float(fit.prior.psi_ia)
    elif fit.model == "hierarchical":
        out["eta"] = float(fit.prior.eta)
        out["nu"] = float(fit.prior.nu)
    elif fit.model == "phasetype":
        b = fit.prior
        p1, p2 = b.dims
        out.update(
            p1=p1, p2=p2,
            eta=[float(v) for v in b.eta],
            T11=[float(v) for v in b.T11.ravel()],
            T12=[float(v) for v in b.T12.ravel()],
            T22=[float(v) for v in b.T22.ravel()],
            seed=fit.diagnostics.get("seed"),
        )
    return out


def fit_from_dict(data: dict) -> MixedPoissonFit:
    model = data["model"]
    betas = {"ai": np.array(data["beta_ai"]), "ia": np.array(data["beta_ia"])}
    prior = None
    diagnostics = {}
    if model == "simple":
        prior = GammaPrior(data["psi_ai"], data["psi_ia"])
    elif model == "hierarchical":
        prior = HierPrior(data["eta"], data["nu"])
    elif model == "phasetype":
        p1, p2 = data["p1"], data["p2"]
        prior = BivariatePH(
            np.array(data["eta"]),
            np.array(data["T11"]).reshape(p1, p1),
            np.array(data["T12"]).reshape(p1, p2),
            np.array(data["T22"]).reshape(p2, p2),
        )
        diagnostics["seed"] = data.get("seed")
    posts = {gid: (v[0], v[1]) for gid, v in data["group_posteriors"].items()}
    return MixedPoissonFit(
        model=model, betas=betas, prior=prior, group_posteriors=posts,
        loglik=data["loglik"], iterations=0, converged=True, diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_format(v) for v in row) + "\n")


def _format(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_outputs(report: StudyReport, outdir, figures: bool = True) -> list:
    """Write the study tables, per-model fit records and resolved config.

    Returns the list of written paths.  CSV cells use shortest round-trip
    float formatting, so identical reports serialize byte-identically.
    """
    import os

    os.makedirs(outdir, exist_ok=True)
    written = []

    path = os.path.join(outdir, "loglik.csv")
    _write_csv(path, ["case", "model", "replication", "loglik"], report.loglik_rows)
    written.append(path)

    path = os.path.join(outdir, "premium_errors.csv")
    _write_csv(path, ["case", "model", "replication", "rmse", "mae"], report.error_rows)
    written.append(path)

    path = os.path.join(outdir, "effects_scatter.csv")
    _write_csv(
        path,
        ["case", "model", "group_id", "theta_ai_true", "theta_ai_scaled",
         "theta_ia_true", "theta_ia_scaled"],
        report.effects_rows,
    )
    written.append(path)

    for (case, model), fit in sorted(report.fits.items()):
        path = os.path.join(outdir, f"fit_{model}_{case}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(fit_to_dict(fit), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)

    path = os.path.join(outdir, "config_resolved.json")
    resolved = report.config.to_dict()
    resolved["failures"] = [list(f) for f in report.failures]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)

    if figures:
        from .figures import render_report_figures

        written.extend(render_report_figures(report, outdir))
    return written
