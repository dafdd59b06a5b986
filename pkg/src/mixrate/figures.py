"""Rendered figures for study reports.

The CSV tables remain the canonical output; these figures are the quick
visual companions (true vs estimated effects, loglikelihood spread across
replications, premium error bars) written as PNG next to the tables.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

MODEL_COLORS = {
    "standard": "tab:gray",
    "fixed": "tab:orange",
    "simple": "tab:blue",
    "hierarchical": "tab:green",
    "phasetype": "tab:red",
}


def _effects_figure(report, case, path):
    rows = [r for r in report.effects_rows if r[0] == case]
    models = sorted({r[1] for r in rows}, key=lambda m: list(MODEL_COLORS).index(m))
    if not rows or not models:
        return False
    fig, axes = plt.subplots(2, len(models), figsize=(3.2 * len(models), 6.2), squeeze=False)
    for col, model in enumerate(models):
        sub = [r for r in rows if r[1] == model]
        for row_i, (ti, si, label) in enumerate(
            [(3, 4, "disability effect"), (5, 6, "recovery effect")]
        ):
            ax = axes[row_i][col]
            xs = [r[ti] for r in sub]
            ys = [r[si] for r in sub]
            ax.scatter(xs, ys, s=12, alpha=0.7, color=MODEL_COLORS.get(model, "k"))
            lim = max([v for v in xs + ys if v == v] + [1.0]) * 1.05
            ax.plot([0, lim], [0, lim], lw=0.8, color="k", ls="--")
            ax.set_xlim(0, lim)
            ax.set_ylim(0, lim)
            if row_i == 0:
                ax.set_title(model)
            if col == 0:
                ax.set_ylabel(f"estimated {label}")
            ax.set_xlabel(f"true {label}")
    fig.suptitle(f"Case {case}: true vs scaled estimated group effects")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return True


def _loglik_figure(report, path):
    cases = sorted({r[0] for r in report.loglik_rows})
    if not cases:
        return False
    fig, axes = plt.subplots(len(cases), 1, figsize=(7.0, 2.6 * len(cases)), squeeze=False)
    for i, case in enumerate(cases):
        ax = axes[i][0]
        rows = [r for r in report.loglik_rows if r[0] == case and r[1] not in ("standard", "fixed")]
        for model in sorted({r[1] for r in rows}):
            pts = sorted([(r[2], r[3]) for r in rows if r[1] == model])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3,
                    lw=1.0, label=model, color=MODEL_COLORS.get(model, "k"))
        ax.set_title(f"Case {case}")
        ax.set_xlabel("replication")
        ax.set_ylabel("loglikelihood")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return True


def _errors_figure(report, path):
    cases = sorted({r[0] for r in report.error_rows})
    if not cases:
        return False
    fig, axes = plt.subplots(1, len(cases), figsize=(3.4 * len(cases), 3.4), squeeze=False)
    for i, case in enumerate(cases):
        ax = axes[0][i]
        rows = [r for r in report.error_rows if r[0] == case]
        models = sorted({r[1] for r in rows}, key=lambda m: list(MODEL_COLORS).index(m))
        means = []
        for model in models:
            vals = [r[3] for r in rows if r[1] == model]
            means.append(sum(vals) / len(vals))
        ax.bar(range(len(models)), means,
               color=[MODEL_COLORS.get(m, "k") for m in models])
        ax.set_xticks(range(len(models)))
        ax.set_xticklabels(models, rotation=45, ha="right", fontsize=8)
        ax.set_title(f"Case {case}")
        ax.set_ylabel("premium RMSE (hundredths)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return True


def render_report_figures(report, outdir) -> list:
    """Render the report figures; returns the list of files written."""
    written = []
    for case in sorted({r[0] for r in report.effects_rows}):
        path = os.path.join(outdir, f"effects_scatter_{case}.png")
        if _effects_figure(report, case, path):
            written.append(path)
    path = os.path.join(outdir, "loglik_by_replication.png")
    if _loglik_figure(report, path):
        written.append(path)
    path = os.path.join(outdir, "premium_rmse.png")
    if _errors_figure(report, path):
        written.append(path)
    return written
