"""Command-line interface: estimate, simulate, diagnose.

Exit codes: 0 success, 1 flag/validation error (message names the flag),
2 solver failure (diagnostics JSON is still written when an output path was
given).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aipw import aipw_estimate, ipw_estimate, select_kappa
from .bregman import nested_decomposition
from .data_model import BasisSpec, QWeights, build_basis, load_csv
from .entropy import DomainError, LinkRangeError, parse_entropy
from .gec_core import (
    InfeasibleCalibration,
    NonConvergence,
    build_design,
    constraint_residuals,
    gec_estimate,
    recover_weights,
    select_kappa_gec,
    solve_dual,
)
from .highdim import SoftCalibConfig, default_taus, fit_gamma_hd, gec_hd_estimate, soft_solve
from .propensity import cross_validate_penalty, fit_logistic, fit_logistic_l1
from .report import (
    render_bregman_figure,
    render_summary_figure,
    write_json,
    write_summary_csv,
    write_summary_json,
)
from .sim import ROSTER_ALL, SimScenario, run_monte_carlo

SOLVER_FAILURES = (InfeasibleCalibration, NonConvergence, DomainError, LinkRangeError)


class _CliError(Exception):
    """Validation failure; the message must name the offending flag."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gec",
        description="Generalized entropy calibration weighting for missing-at-random data.",
    )
    parser.add_argument("--version", action="version", version=f"gec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate a population mean from a CSV file")
    est.add_argument("--data", required=True, help="input CSV with header row")
    est.add_argument("--outcome", required=True, help="name of the outcome column")
    est.add_argument("--indicator", default=None,
                     help="optional 0/1 response-indicator column (default: blank outcome cells)")
    est.add_argument("--estimator", default="gec", choices=("gec", "ipw", "aipw"),
                     help="estimator family")
    est.add_argument("--entropy", default="el",
                     help="entropy kind: el, et, contrast, hd, loglog, inverse, renyi:<alpha>")
    est.add_argument("--constraints", default="balance,debias,orthogonal",
                     help="comma list among balance,debias,orthogonal (balance is mandatory)")
    est.add_argument("--q", default="unit",
                     help="q weights: unit, power:auto, or power:<kappa>")
    est.add_argument("--q-family", default=None, choices=(None, "unit", "power"),
                     help="(aipw) q family; with power, see --kappa")
    est.add_argument("--kappa", default="auto",
                     help="(aipw) q exponent, a real number or 'auto'")
    est.add_argument("--level", type=float, default=0.95, help="confidence level")
    est.add_argument("--rp-cols", default=None,
                     help="comma list of 1-based covariate columns for the propensity model")
    est.add_argument("--rp-penalty", default=None,
                     help="L1 penalty for the propensity fit: a real number or 'cv'")
    est.add_argument("--or-cols", default=None,
                     help="comma list of 1-based covariate columns for the outcome basis "
                          "(default: all columns)")
    est.add_argument("--v-mode", default="unit", choices=("unit", "residual"),
                     help="variance proxy used by kappa selection")
    est.add_argument("--mode", default="exact", choices=("exact", "hd"),
                     help="hd switches to soft calibration for high-dimensional covariates")
    est.add_argument("--tau1", default="rate", help="lasso penalty: a real number or 'rate'")
    est.add_argument("--tau2", default="rate", help="soft-balance bound: a real number or 'rate'")
    est.add_argument("--sparsity-hint", type=int, default=None,
                     help="sparsity guess entering the rate-based tau2")
    est.add_argument("--out", default=None, help="path for the JSON result")

    simp = sub.add_parser("simulate", help="run the Monte Carlo study")
    simp.add_argument("--scenario", required=True,
                      help="one of O1V1, O1V2, O2V1, O2V2")
    simp.add_argument("--B", type=int, default=1000, help="number of replications")
    simp.add_argument("--seed", type=int, default=42, help="RNG seed")
    simp.add_argument("--N", type=int, default=1000, help="population size per replication")
    simp.add_argument("--roster", default="all",
                      help="comma list of estimators, or 'all'")
    simp.add_argument("--threads", type=int, default=None,
                      help="worker processes (default: GEC_THREADS or 1)")
    simp.add_argument("--out", required=True, help="output CSV path")
    simp.add_argument("--no-figures", action="store_true",
                      help="skip rendering the summary figure next to the CSV")

    diag = sub.add_parser("diagnose", help="calibration diagnostics on a CSV file")
    diag.add_argument("--bregman", action="store_true",
                      help="emit the divergence decomposition report")
    diag.add_argument("--data", required=True)
    diag.add_argument("--outcome", required=True)
    diag.add_argument("--indicator", default=None)
    diag.add_argument("--entropy", default="el")
    diag.add_argument("--constraints", default="balance,debias,orthogonal",
                      help="full constraint set")
    diag.add_argument("--baseline-constraints", default="balance,debias",
                      help="reduced constraint set to price against")
    diag.add_argument("--q", default="unit")
    diag.add_argument("--rp-cols", default=None)
    diag.add_argument("--rp-penalty", default=None)
    diag.add_argument("--or-cols", default=None)
    diag.add_argument("--top-units", type=int, default=10)
    diag.add_argument("--out", default=None, help="path for the JSON report")
    diag.add_argument("--no-figures", action="store_true")
    return parser


def _parse_cols(text, p0, flag):
    if text is None:
        return tuple(range(p0))
    try:
        cols = tuple(int(t) - 1 for t in text.split(",") if t.strip())
    except ValueError:
        raise _CliError(f"{flag} expects a comma list of integers, got {text!r}") from None
    for c in cols:
        if not 0 <= c < p0:
            raise _CliError(f"{flag} column {c + 1} out of range (data has {p0} columns)")
    return cols


def _parse_constraints(text, flag="--constraints"):
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    for name in names:
        if name not in ("balance", "debias", "orthogonal"):
            raise _CliError(f"{flag}: unknown constraint {name!r}")
    if "balance" not in names:
        raise _CliError(f"{flag} must include 'balance'")
    return names


def _fit_propensity(data, rp_cols, rp_penalty):
    if rp_penalty is None:
        return fit_logistic(data, rp_cols)
    if rp_penalty == "cv":
        penalty = cross_validate_penalty(data, rp_cols)
    else:
        try:
            penalty = float(rp_penalty)
        except ValueError:
            raise _CliError(f"--rp-penalty expects a real number or 'cv', got {rp_penalty!r}") from None
    return fit_logistic_l1(data, penalty, rp_columns=rp_cols)


def _resolve_q(text, pi_hat, data, basis, fit, entropy, v_mode):
    if text == "unit":
        return QWeights.unit(len(pi_hat)), None
    if text.startswith("power:"):
        tail = text.split(":", 1)[1]
        if tail == "auto":
            kappa = select_kappa_gec(data, basis, fit, entropy, v_mode=v_mode)
        else:
            try:
                kappa = float(tail)
            except ValueError:
                raise _CliError(f"--q power exponent must be a real number or 'auto', got {tail!r}") from None
        return QWeights.propensity_power(pi_hat, kappa), kappa
    raise _CliError(f"--q expects unit, power:auto, or power:<kappa>, got {text!r}")


def _cmd_estimate(args) -> int:
    data = load_csv(args.data, args.outcome, args.indicator)
    p0 = data.covariates.shape[1]
    rp_cols = _parse_cols(args.rp_cols, p0, "--rp-cols")
    or_cols = _parse_cols(args.or_cols, p0, "--or-cols")
    basis = build_basis(data, BasisSpec.with_raw_columns(or_cols))
    config = {k: v for k, v in vars(args).items() if k != "command"}

    if args.mode == "hd" and args.estimator != "gec":
        raise _CliError("--mode hd only applies to --estimator gec")
    if args.mode == "hd" and args.constraints != "balance,debias,orthogonal":
        raise _CliError("--mode hd fixes the constraint structure; do not pass --constraints")

    fit = _fit_propensity(data, rp_cols, args.rp_penalty)

    if args.estimator == "ipw":
        est = ipw_estimate(data, fit)
        payload = {"theta_hat": est.theta_hat, "estimator": "ipw"}
        if args.out:
            write_json(payload, args.out, config=config)
        print(json.dumps(payload))
        return 0

    if args.estimator == "aipw":
        family = args.q_family or "unit"
        if family == "unit":
            q = QWeights.unit(data.n_units)
            kappa = None
        else:
            if args.kappa == "auto":
                kappa = select_kappa(data, fit, basis, v_mode=args.v_mode)
            else:
                try:
                    kappa = float(args.kappa)
                except ValueError:
                    raise _CliError(f"--kappa expects a real number or 'auto', got {args.kappa!r}") from None
            q = QWeights.propensity_power(fit.pi_hat, kappa)
        est = aipw_estimate(data, fit, basis, q)
        payload = {"theta_hat": est.theta_hat, "estimator": "aipw", "kappa": kappa}
        if args.out:
            write_json(payload, args.out, config=config)
        print(json.dumps(payload))
        return 0

    entropy = parse_entropy(args.entropy)
    try:
        if args.mode == "hd":
            q = QWeights.unit(data.n_units)
            n_resp = data.n_responded
            t1_rate, t2_rate = default_taus(n_resp, basis.shape[1], args.sparsity_hint)
            tau1 = t1_rate if args.tau1 == "rate" else float(args.tau1)
            tau2 = t2_rate if args.tau2 == "rate" else float(args.tau2)
            design = build_design(data, basis, fit, entropy, q,
                                  ("balance", "debias", "orthogonal"))
            gamma_hd = fit_gamma_hd(data, design, entropy, tau1)
            solution, weights = soft_solve(
                data, basis, fit, entropy, q,
                gamma_hd, SoftCalibConfig(tau1=tau1, tau2=tau2), design=design,
            )
            est = gec_hd_estimate(data, weights, design, gamma_hd, level=args.level)
            payload = {
                "theta_hat": est.theta_hat,
                "v_hat": est.v_hat,
                "ci_lo": est.ci[0],
                "ci_hi": est.ci[1],
                "entropy": entropy.name,
                "kappa": None,
                "tau1": tau1,
                "tau2": tau2,
                "constraint_residuals": {"kkt": solution.kkt_residual},
                "solver": {"iterations": solution.iterations,
                           "grad_norm": solution.kkt_residual},
            }
        else:
            constraints = _parse_constraints(args.constraints)
            q, kappa = _resolve_q(args.q, fit.pi_hat, data, basis, fit, entropy, args.v_mode)
            design = build_design(data, basis, fit, entropy, q, constraints)
            dual = solve_dual(design, entropy)
            weights = recover_weights(design, entropy, dual)
            est = gec_estimate(data, weights, design, entropy, level=args.level)
            resid = constraint_residuals(design, weights)
            payload = {
                "theta_hat": est.theta_hat,
                "v_hat": est.v_hat,
                "ci_lo": est.ci[0],
                "ci_hi": est.ci[1],
                "entropy": entropy.name,
                "kappa": kappa,
                "constraint_residuals": {
                    str(j): float(r) for j, r in enumerate(resid)
                },
                "solver": {"iterations": dual.iterations, "grad_norm": dual.grad_norm},
            }
    except SOLVER_FAILURES as exc:
        failure = {
            "error": str(exc),
            "error_type": type(exc).__name__,
            "solver": {
                "iterations": getattr(exc, "iterations", None),
                "grad_norm": getattr(exc, "grad_norm", None),
            },
        }
        if args.out:
            write_json(failure, args.out, config=config)
        print(json.dumps(failure), file=sys.stderr)
        return 2

    if args.out:
        write_json(payload, args.out, config=config)
    print(json.dumps(payload))
    return 0


def _cmd_simulate(args) -> int:
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("GEC_THREADS", "1"))
    if args.roster == "all":
        roster = ROSTER_ALL
    else:
        roster = tuple(t.strip() for t in args.roster.split(",") if t.strip())
        unknown = [r for r in roster if r not in ROSTER_ALL]
        if unknown:
            raise _CliError(f"--roster: unknown estimators {unknown}")
    scenario = SimScenario.from_name(args.scenario, n_reps=args.B, seed=args.seed,
                                     n_units=args.N)
    summary = run_monte_carlo(scenario, roster, threads=threads)
    out = Path(args.out)
    write_summary_csv(summary, out)
    config = {k: v for k, v in vars(args).items() if k != "command"}
    write_summary_json(summary, out.with_suffix(".json"), config=config)
    if not args.no_figures:
        render_summary_figure(summary, out.with_suffix(".png"))
    print(f"wrote {out} ({len(summary.rows)} estimators, B={summary.n_reps})")
    return 0


def _cmd_diagnose(args) -> int:
    if not args.bregman:
        raise _CliError("diagnose currently requires --bregman")
    data = load_csv(args.data, args.outcome, args.indicator)
    p0 = data.covariates.shape[1]
    rp_cols = _parse_cols(args.rp_cols, p0, "--rp-cols")
    or_cols = _parse_cols(args.or_cols, p0, "--or-cols")
    basis = build_basis(data, BasisSpec.with_raw_columns(or_cols))
    entropy = parse_entropy(args.entropy)
    fit = _fit_propensity(data, rp_cols, args.rp_penalty)
    full_names = _parse_constraints(args.constraints)
    sub_names = _parse_constraints(args.baseline_constraints, "--baseline-constraints")
    if not set(sub_names) <= set(full_names):
        raise _CliError("--baseline-constraints must be a subset of --constraints")
    if args.q != "unit":
        raise _CliError("--q: diagnostics currently support unit q weights only")
    q = QWeights.unit(data.n_units)
    config = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        design_full = build_design(data, basis, fit, entropy, q, full_names)
        design_sub = build_design(data, basis, fit, entropy, q, sub_names)
        report = nested_decomposition(
            entropy, q, data.responded, design_full, design_sub, 1.0 / fit.pi_hat
        )
    except SOLVER_FAILURES as exc:
        failure = {"error": str(exc), "error_type": type(exc).__name__}
        if args.out:
            write_json(failure, args.out, config=config)
        print(json.dumps(failure), file=sys.stderr)
        return 2
    order = np.argsort(report.per_unit)[::-1][: args.top_units]
    resp_index = np.flatnonzero(data.responded)
    payload = {
        "total": report.total,
        "baseline": report.baseline,
        "extras": report.extras,
        "ratio": report.ratio,
        "top_units": [
            {"index": int(resp_index[i]), "contribution": float(report.per_unit[i])}
            for i in order
        ],
    }
    if args.out:
        write_json(payload, args.out, config=config)
        if not args.no_figures:
            render_bregman_figure(report, Path(args.out).with_suffix(".png"),
                                  top=args.top_units)
    print(json.dumps(payload))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "estimate":
            return _cmd_estimate(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        return _cmd_diagnose(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
