"""Command line interface: simulate, fit, price, evaluate, study.

All verbs are deterministic functions of (config, seed).  Failures exit
nonzero with a machine-readable JSON error on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .core import read_panel_csv
from .gamma_mix import em_fit_independent_gamma
from .glm import fit_fixed_effects, fit_standard
from .hier_mix import ecm_fit_hier
from .phasetype import em_fit_bivph_mixed_poisson
from .simulate import ScenarioConfig, build_frame, simulate_paths_dataset
from .study import (
    ALL_MODELS,
    StudyConfig,
    compute_metrics,
    emit_outputs,
    fit_from_dict,
    fit_to_dict,
    run_scenario,
)
from .thiele import portfolio_premiums
from .simulate import TRUE_BETAS, mortality_rate_active, mortality_rate_disabled
from .core import write_panel_csv

MORTALITY = {"ad": mortality_rate_active, "id": mortality_rate_disabled}


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _study_config(args) -> StudyConfig:
    raw = _load_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.replications is not None:
        raw["replications"] = args.replications
    if getattr(args, "case", None):
        raw["cases"] = [args.case]
    if getattr(args, "model", None) and args.model != "all":
        raw["models"] = [args.model]
    if getattr(args, "aggregate", None):
        raw["aggregate"] = args.aggregate
    if args.scale is not None:
        raw["total_insured"] = max(1, int(round(raw.get("total_insured", 5000) * args.scale)))
    if "p_dims" in raw:
        raw["p_dims"] = {k: tuple(v) for k, v in raw["p_dims"].items()}
    known = {f.name for f in StudyConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("cases", "models"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return StudyConfig(**raw)


def _scenario_config(args) -> ScenarioConfig:
    raw = _load_config(args.config)
    kwargs = {
        k: raw[k]
        for k in ("n_groups", "total_insured", "coverage_years", "terminal_age")
        if k in raw
    }
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    if args.scale is not None:
        kwargs["total_insured"] = max(
            1, int(round(kwargs.get("total_insured", 50000) * args.scale))
        )
    return ScenarioConfig(case=args.case, seed=seed, **kwargs)


def cmd_simulate(args) -> int:
    config = _scenario_config(args)
    frame = build_frame(config)
    dataset = simulate_paths_dataset(frame, args.replication)
    os.makedirs(args.out, exist_ok=True)
    write_panel_csv(dataset, os.path.join(args.out, f"panel_{config.case}.csv"))
    with open(os.path.join(args.out, f"effects_{config.case}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "theta_ai", "theta_ia"])
        for gid, eff in zip(frame.group_ids, frame.effects):
            w.writerow([gid, repr(float(eff[0])), repr(float(eff[1]))])
    with open(os.path.join(args.out, f"insured_{config.case}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "insured_id", "entry_age"])
        for gid, ages in zip(frame.group_ids, frame.entry_ages):
            for i, age in enumerate(ages):
                w.writerow([gid, i, repr(float(age))])
    print(f"wrote panel, effects and insured tables for case {config.case} to {args.out}")
    return 0


def cmd_fit(args) -> int:
    dataset = read_panel_csv(args.panel)
    if args.model == "standard":
        fit = fit_standard(dataset)
    elif args.model == "fixed":
        fit = fit_fixed_effects(dataset)
    elif args.model == "simple":
        fit = em_fit_independent_gamma(dataset)
    elif args.model == "hierarchical":
        fit = ecm_fit_hier(dataset)
    elif args.model == "phasetype":
        fit = em_fit_bivph_mixed_poisson(
            dataset, dims=(args.p1, args.p2), seed=args.seed or 0
        )
    else:
        raise ValueError(f"unknown model {args.model}")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(fit_to_dict(fit), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{args.model}: loglik {fit.loglik:.4f} after {fit.iterations} iterations "
          f"({'converged' if fit.converged else 'not converged'}); wrote {args.out}")
    return 0


def _read_insured(path):
    groups = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(row["group_id"], []).append(float(row["entry_age"]))
    gids = sorted(groups)
    return gids, [np.array(groups[g]) for g in gids]


def _read_effects(path):
    effects = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            effects[row["group_id"]] = (float(row["theta_ai"]), float(row["theta_ia"]))
    return effects


def cmd_price(args) -> int:
    with open(args.fit, encoding="utf-8") as fh:
        fit = fit_from_dict(json.load(fh))
    gids, ages = _read_insured(args.insured)
    true_effects = _read_effects(args.effects)
    eff_model = np.array([fit.group_posteriors[g] for g in gids])
    eff_true = np.array([true_effects[g] for g in gids])
    kw = dict(
        interest=args.interest, coverage=args.coverage,
        terminal_age=args.terminal_age, step=args.step,
    )
    prem_model = portfolio_premiums(ages, eff_model, fit.betas, MORTALITY, **kw)
    prem_true = portfolio_premiums(ages, eff_true, TRUE_BETAS, MORTALITY, **kw)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "insured_id", "entry_age", "premium_true",
                    "premium_model", "model_tag"])
        for g, gid in enumerate(gids):
            for i, age in enumerate(ages[g]):
                w.writerow([gid, i, repr(float(age)), repr(float(prem_true[g][i])),
                            repr(float(prem_model[g][i])), fit.model])
    print(f"wrote premiums for {sum(len(a) for a in ages)} insured to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    rows = []
    with open(args.premiums, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    if not rows:
        raise ValueError("premium table is empty")
    gids = sorted({r["group_id"] for r in rows})
    gmap = {g: i for i, g in enumerate(gids)}
    true_p = np.array([float(r["premium_true"]) for r in rows])
    model_p = np.array([float(r["premium_model"]) for r in rows])
    gidx = np.array([gmap[r["group_id"]] for r in rows])
    rmse, mae = compute_metrics(true_p, model_p, gidx, aggregate=args.aggregate)
    tag = rows[0]["model_tag"]
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model_tag", "aggregate", "rmse", "mae"])
        w.writerow([tag, args.aggregate, repr(rmse), repr(mae)])
    print(f"{tag}: RMSE {rmse:.3f}, MAE {mae:.3f} (hundredths, per {args.aggregate})")
    return 0


def cmd_study(args) -> int:
    config = _study_config(args)
    report = run_scenario(config)
    written = emit_outputs(report, args.out, figures=not args.no_figures)
    for case, model, rep, msg in report.failures:
        print(f"FAILED {case}/{model}/rep{rep}: {msg}", file=sys.stderr)
    print(f"wrote {len(written)} files to {args.out}")
    return 0 if not report.failures else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixrate",
        description="Experience rating with multivariate mixed Poisson models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one portfolio and write its panel")
    p.add_argument("--config", default=None)
    p.add_argument("--case", default="A", choices=["A", "B", "C"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replication", type=int, default=0)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model to a panel CSV")
    p.add_argument("--panel", required=True)
    p.add_argument("--model", required=True, choices=list(ALL_MODELS))
    p.add_argument("--p1", type=int, default=3)
    p.add_argument("--p2", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("price", help="price the portfolio under a fitted model")
    p.add_argument("--fit", required=True)
    p.add_argument("--insured", required=True)
    p.add_argument("--effects", required=True)
    p.add_argument("--interest", type=float, default=0.01)
    p.add_argument("--coverage", type=float, default=3.0)
    p.add_argument("--terminal-age", type=float, default=67.0, dest="terminal_age")
    p.add_argument("--step", type=float, default=1.0 / 12.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("evaluate", help="score a premium table")
    p.add_argument("--premiums", required=True)
    p.add_argument("--aggregate", default="insured", choices=["insured", "group"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("study", help="run the end-to-end comparison study")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--case", default=None, choices=["A", "B", "C"])
    p.add_argument("--model", default=None, choices=list(ALL_MODELS) + ["all"])
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--aggregate", default=None, choices=["insured", "group"])
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        json.dump(
            {"error": type(exc).__name__, "message": str(exc), "command": args.command},
            sys.stderr,
        )
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
