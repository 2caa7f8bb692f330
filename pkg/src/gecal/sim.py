"""Monte Carlo harness: factorial missing-data study and a high-dimensional
synthetic companion.

Populations are drawn fresh for every replication (the companion study keeps
one fixed population and redraws missingness), estimators all see identical
data within a replication, and each replication runs on its own
counter-based RNG substream so results are reproducible under any worker
schedule.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import aipw as aipw_mod
from .data_model import BasisSpec, ObservedData, QWeights, build_basis
from .entropy import DomainError, EntropySpec, LinkRangeError
from .gec_core import (
    InfeasibleCalibration,
    NonConvergence,
    build_design,
    gec_estimate,
    recover_weights,
    select_kappa_gec,
    solve_dual,
)
from .highdim import SoftCalibConfig, default_taus, fit_gamma_hd, gec_hd_estimate, soft_solve
from .propensity import fit_logistic, fit_logistic_l1
from .regression import fit_lasso_weighted

__all__ = [
    "SimScenario",
    "EstimatorSummary",
    "SimSummary",
    "ROSTER_ALL",
    "generate_population",
    "stratified_missingness",
    "stratum_index",
    "stratum_inclusion_probs",
    "run_monte_carlo",
    "nhanes_like_study",
    "NhanesLikeDesign",
]

SOLVER_ERRORS = (InfeasibleCalibration, NonConvergence, DomainError, LinkRangeError, ValueError, RuntimeError)

ROSTER_ALL = (
    "ipw", "aipw1", "aipw2",
    "el1", "el2", "el3", "el4",
    "et1", "et2", "et3", "et4",
    "hd1", "hd2", "hd3", "hd4",
)

# GEC variant -> (constraint set, whether q is the selected propensity power)
_GEC_VARIANTS = {
    "1": (("balance", "debias"), False),
    "2": (("balance", "debias"), True),
    "3": (("balance", "debias", "orthogonal"), False),
    "4": (("balance", "debias", "orthogonal"), True),
}


@dataclass(frozen=True)
class SimScenario:
    """Factorial design cell: outcome model x variance model."""

    outcome_model: str = "O1"
    variance_model: str = "V1"
    n_units: int = 1000
    strata_sizes: tuple[int, int, int, int] = (150, 100, 100, 50)
    n_reps: int = 1000
    seed: int = 42

    def __post_init__(self):
        if self.outcome_model not in ("O1", "O2"):
            raise ValueError("outcome_model must be 'O1' or 'O2'")
        if self.variance_model not in ("V1", "V2"):
            raise ValueError("variance_model must be 'V1' or 'V2'")

    @property
    def name(self) -> str:
        return f"{self.outcome_model}{self.variance_model}"

    @property
    def theta_true(self) -> float:
        """Analytic mean of the outcome given covariate means of 2.

        O1: 1 + 2 - 2 = 1.  O2 adds 0.5*E[x1 x2] + 0.3*(E[x2^2] - 1)
        = 0.5*4 + 0.3*4 with independent N(2,1) columns.
        """
        if self.outcome_model == "O1":
            return 1.0
        return 1.0 + 0.5 * 4.0 + 0.3 * 4.0

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "SimScenario":
        name = name.upper().strip()
        if len(name) != 4 or name[:2] not in ("O1", "O2") or name[2:] not in ("V1", "V2"):
            raise ValueError(f"unknown scenario {name!r}; expected one of O1V1, O1V2, O2V1, O2V2")
        return cls(outcome_model=name[:2], variance_model=name[2:], **kwargs)


def _rep_rng(seed: int, stream: int, rep: int) -> np.random.Generator:
    # Philox is counter-based; keying by (seed, stream, rep) gives each
    # replication an independent substream regardless of worker order.
    return np.random.Generator(np.random.Philox(key=np.random.SeedSequence([seed, stream, rep]).generate_state(4, np.uint64)))


def generate_population(scenario: SimScenario, rng: np.random.Generator):
    """Draw covariates and outcomes: three N(2,1) columns, y per O1/O2, errors per V1/V2."""
    n = scenario.n_units
    x = rng.normal(2.0, 1.0, size=(n, 3))
    if scenario.variance_model == "V1":
        sd = np.ones(n)
    else:
        sd = np.sqrt(np.maximum(0.5, np.maximum(x[:, 1] ** 2, x[:, 2] ** 2) / 4.0))
    e = rng.normal(0.0, 1.0, size=n) * sd
    y = 1.0 + x[:, 0] - x[:, 1] + e
    if scenario.outcome_model == "O2":
        y = y + 0.5 * x[:, 0] * x[:, 1] + 0.3 * (x[:, 1] ** 2 - 1.0)
    return x, y


def stratum_index(x: np.ndarray) -> np.ndarray:
    """Stratum of each unit on the (x2 <= 2, x3 <= 2) grid, ordered
    (<=,<=), (<=,>), (>,<=), (>,>)."""
    return (x[:, 1] > 2.0).astype(int) * 2 + (x[:, 2] > 2.0).astype(int)


def stratum_inclusion_probs(x: np.ndarray, strata_sizes) -> np.ndarray:
    """True inclusion probability n_h / N_h of each unit's stratum."""
    s = stratum_index(x)
    counts = np.bincount(s, minlength=4)
    sizes = np.asarray(strata_sizes)
    return sizes[s] / counts[s]


def stratified_missingness(x: np.ndarray, strata_sizes, rng: np.random.Generator) -> np.ndarray:
    """Fixed-size without-replacement response draw inside each stratum."""
    s = stratum_index(x)
    responded = np.zeros(x.shape[0], dtype=bool)
    for h, quota in enumerate(strata_sizes):
        members = np.flatnonzero(s == h)
        if members.size < quota:
            raise ValueError(
                f"stratum {h} holds {members.size} units, fewer than its quota {quota}"
            )
        responded[rng.choice(members, size=quota, replace=False)] = True
    return responded


def _draw_scenario_data(scenario: SimScenario, rng) -> ObservedData:
    for _ in range(100):
        x, y = generate_population(scenario, rng)
        counts = np.bincount(stratum_index(x), minlength=4)
        if np.all(counts >= np.asarray(scenario.strata_sizes)):
            responded = stratified_missingness(x, scenario.strata_sizes, rng)
            return ObservedData(covariates=x, outcome=y, responded=responded)
    raise RuntimeError("could not draw a population covering all stratum quotas")


@dataclass
class _RepRecord:
    theta: float = math.nan
    v_hat: float = math.nan
    ci_lo: float = math.nan
    ci_hi: float = math.nan
    residual: float = math.nan
    ok: bool = False


def _evaluate_roster(data: ObservedData, roster, v_mode: str) -> dict:
    """All requested estimators on one replication's data."""
    out = {name: _RepRecord() for name in roster}
    rp_fit = fit_logistic(data, rp_columns=(1, 2))
    basis = build_basis(data, BasisSpec.with_raw_columns((0, 1)))
    n = data.n_units

    if "ipw" in out:
        try:
            est = aipw_mod.ipw_estimate(data, rp_fit)
            out["ipw"] = _RepRecord(theta=est.theta_hat, ok=True)
        except SOLVER_ERRORS:
            pass
    if "aipw1" in out:
        try:
            est = aipw_mod.aipw_estimate(data, rp_fit, basis, QWeights.unit(n))
            out["aipw1"] = _RepRecord(theta=est.theta_hat, ok=True)
        except SOLVER_ERRORS:
            pass
    if "aipw2" in out:
        try:
            kappa = aipw_mod.select_kappa(data, rp_fit, basis, v_mode=v_mode)
            q = QWeights.propensity_power(rp_fit.pi_hat, kappa)
            est = aipw_mod.aipw_estimate(data, rp_fit, basis, q)
            out["aipw2"] = _RepRecord(theta=est.theta_hat, ok=True)
        except SOLVER_ERRORS:
            pass

    entropy_names = sorted({name[:2] for name in roster if name not in ("ipw", "aipw1", "aipw2")})
    for ent_name in entropy_names:
        entropy = EntropySpec(ent_name)
        selected_kappa = None
        needs_kappa = any(f"{ent_name}{v}" in out for v in ("2", "4"))
        if needs_kappa:
            try:
                selected_kappa = select_kappa_gec(data, basis, rp_fit, entropy, v_mode=v_mode)
            except SOLVER_ERRORS:
                selected_kappa = None
        for variant, (constraints, use_power_q) in _GEC_VARIANTS.items():
            name = f"{ent_name}{variant}"
            if name not in out:
                continue
            if use_power_q and selected_kappa is None:
                continue
            q = (
                QWeights.propensity_power(rp_fit.pi_hat, selected_kappa)
                if use_power_q
                else QWeights.unit(n)
            )
            try:
                design = build_design(data, basis, rp_fit, entropy, q, constraints)
                dual = solve_dual(design, entropy)
                weights = recover_weights(design, entropy, dual)
                est = gec_estimate(data, weights, design, entropy)
                out[name] = _RepRecord(
                    theta=est.theta_hat,
                    v_hat=est.v_hat,
                    ci_lo=est.ci[0],
                    ci_hi=est.ci[1],
                    residual=dual.grad_norm,
                    ok=True,
                )
            except SOLVER_ERRORS:
                pass
    return out


def _scenario_chunk(scenario: SimScenario, roster, reps):
    rows = []
    for b in reps:
        rng = _rep_rng(scenario.seed, 0, b)
        data = _draw_scenario_data(scenario, rng)
        v_mode = "unit" if scenario.variance_model == "V1" else "residual"
        records = _evaluate_roster(data, roster, v_mode)
        rows.append((b, records))
    return rows


@dataclass(frozen=True)
class EstimatorSummary:
    bias: float
    rmse: float
    variance: float
    var_rel_bias: float
    coverage: float
    bias_se: float
    rmse_se: float
    coverage_se: float
    n_used: int
    n_failed: int
    max_residual: float


@dataclass
class SimSummary:
    scenario: str
    theta: float
    n_reps: int
    rows: dict[str, EstimatorSummary]
    estimates: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        cols = [
            "bias", "rmse", "variance", "var_rel_bias", "coverage",
            "bias_se", "rmse_se", "coverage_se", "n_used", "n_failed", "max_residual",
        ]
        table = {c: [getattr(self.rows[name], c) for name in self.rows] for c in cols}
        return pd.DataFrame(table, index=list(self.rows)).rename_axis("estimator")


def _summarize(scenario_name, theta, n_reps, roster, collected, n_units) -> SimSummary:
    rows = {}
    estimates = {}
    for name in roster:
        th = np.array([collected[b][name].theta for b in range(n_reps)])
        ok = np.array([collected[b][name].ok for b in range(n_reps)])
        v = np.array([collected[b][name].v_hat for b in range(n_reps)])
        lo = np.array([collected[b][name].ci_lo for b in range(n_reps)])
        hi = np.array([collected[b][name].ci_hi for b in range(n_reps)])
        resid = np.array([collected[b][name].residual for b in range(n_reps)])
        used = ok & np.isfinite(th)
        n_used = int(used.sum())
        estimates[name] = np.where(used, th, np.nan)
        if n_used == 0:
            rows[name] = EstimatorSummary(*(math.nan,) * 8, 0, int(n_reps), math.nan)
            continue
        err = th[used] - theta
        bias = float(err.mean())
        variance = float(np.mean((err - bias) ** 2))
        rmse = float(math.sqrt(np.mean(err**2)))
        bias_se = float(np.std(err, ddof=1) / math.sqrt(n_used)) if n_used > 1 else math.nan
        rmse_se = (
            float(np.std(err**2, ddof=1) / (2.0 * rmse * math.sqrt(n_used)))
            if n_used > 1 and rmse > 0
            else math.nan
        )
        have_v = used & np.isfinite(v)
        if have_v.any() and n_used > 1:
            emp_var = float(np.var(th[used], ddof=1))
            var_rel_bias = float(np.mean(v[have_v] / n_units) / emp_var - 1.0)
        else:
            var_rel_bias = math.nan
        have_ci = used & np.isfinite(lo) & np.isfinite(hi)
        if have_ci.any():
            covered = (lo[have_ci] <= theta) & (theta <= hi[have_ci])
            coverage = float(covered.mean())
            coverage_se = float(math.sqrt(max(coverage * (1.0 - coverage), 1e-12) / covered.size))
        else:
            coverage = math.nan
            coverage_se = math.nan
        rows[name] = EstimatorSummary(
            bias=bias,
            rmse=rmse,
            variance=variance,
            var_rel_bias=var_rel_bias,
            coverage=coverage,
            bias_se=bias_se,
            rmse_se=rmse_se,
            coverage_se=coverage_se,
            n_used=n_used,
            n_failed=int(n_reps - n_used),
            max_residual=float(np.nanmax(resid)) if np.isfinite(resid).any() else math.nan,
        )
    return SimSummary(
        scenario=scenario_name,
        theta=theta,
        n_reps=n_reps,
        rows=rows,
        estimates=estimates,
    )


def _chunked(indices, n_chunks):
    chunks = np.array_split(np.asarray(indices), max(n_chunks, 1))
    return [c.tolist() for c in chunks if c.size]


def run_monte_carlo(
    scenario: SimScenario,
    estimator_roster=ROSTER_ALL,
    threads: int = 1,
) -> SimSummary:
    """Replicate the design and summarize every estimator against the
    analytic population mean."""
    roster = tuple(estimator_roster)
    if not roster:
        raise ValueError("estimator roster is empty")
    unknown = [name for name in roster if name not in ROSTER_ALL]
    if unknown:
        raise ValueError(f"unknown estimators {unknown}; valid: {ROSTER_ALL}")
    reps = list(range(scenario.n_reps))
    collected: dict[int, dict] = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_scenario_chunk, scenario, roster, chunk)
                for chunk in _chunked(reps, threads * 4)
            ]
            for fut in futures:
                for b, records in fut.result():
                    collected[b] = records
    else:
        for b, records in _scenario_chunk(scenario, roster, reps):
            collected[b] = records
    return _summarize(
        scenario.name, scenario.theta_true, scenario.n_reps, roster, collected, scenario.n_units
    )


# -- high-dimensional companion study ---------------------------------------


@dataclass(frozen=True)
class NhanesLikeDesign:
    """Synthetic stand-in for a health-survey population: one fixed population,
    missingness redrawn per replication from a sparse logistic truth."""

    n_units: int = 9254
    n_covariates: int = 21
    response_rate: float = 0.319
    seed: int = 7
    ar_rho: float = 0.3
    outcome_sd: float = 8.0

    def build_population(self):
        rng = np.random.Generator(
            np.random.Philox(key=np.random.SeedSequence([self.seed, 271828]).generate_state(4, np.uint64))
        )
        p = self.n_covariates
        cov = self.ar_rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        x = rng.standard_normal((self.n_units, p)) @ np.linalg.cholesky(cov).T
        # sparse logistic truth on the first eight columns
        phi = np.zeros(p)
        phi[:8] = [0.9, -0.8, 0.7, -0.6, 0.5, -0.45, 0.4, -0.35]
        lp = x @ phi
        intercept = _calibrate_intercept(lp, self.response_rate)
        pi_true = 1.0 / (1.0 + np.exp(-(intercept + lp)))
        beta = np.zeros(p)
        beta[[0, 1, 2, 3, 4, 5, 8, 9]] = [6.0, -5.0, 4.0, 3.0, -3.0, 2.0, 2.0, -2.0]
        y = 121.3 + x @ beta + 0.8 * x[:, 0] * x[:, 1] + rng.normal(0.0, self.outcome_sd, self.n_units)
        return x, y, pi_true


def _calibrate_intercept(lp: np.ndarray, target_rate: float) -> float:
    lo, hi = -20.0, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate = float(np.mean(1.0 / (1.0 + np.exp(-(mid + lp)))))
        if rate < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


NHANES_ROSTER = ("ipw", "aipw", "gec_el", "gec_et", "gec_hd")


def _nhanes_chunk(design: NhanesLikeDesign, roster, reps, rp_penalty, tau1, tau2):
    x, y, pi_true = design.build_population()
    n, p = x.shape
    basis = np.column_stack([np.ones(n), x])
    rows = []
    for b in reps:
        rng = _rep_rng(design.seed, 1, b)
        responded = rng.random(n) < pi_true
        data = ObservedData(covariates=x, outcome=y, responded=responded)
        records = {name: _RepRecord() for name in roster}
        try:
            rp_fit = fit_logistic_l1(data, rp_penalty)
        except SOLVER_ERRORS:
            rows.append((b, records))
            continue
        if "ipw" in records:
            try:
                est = aipw_mod.ipw_estimate(data, rp_fit)
                records["ipw"] = _RepRecord(theta=est.theta_hat, ok=True)
            except SOLVER_ERRORS:
                pass
        if "aipw" in records:
            try:
                beta = fit_lasso_weighted(basis, y, responded, np.ones(n), tau1).coef
                resp = data.responded
                gap = basis.mean(axis=0) - basis[resp].T @ (1.0 / rp_fit.pi_hat[resp]) / n
                theta = float(
                    np.sum(data.observed_outcome / rp_fit.pi_hat[resp]) / n + gap @ beta
                )
                records["aipw"] = _RepRecord(theta=theta, ok=True)
            except SOLVER_ERRORS:
                pass
        for name in roster:
            if not name.startswith("gec_"):
                continue
            entropy = EntropySpec(name.split("_", 1)[1])
            try:
                q = QWeights.unit(n)
                hd_design = build_design(
                    data, basis, rp_fit, entropy, q, ("balance", "debias", "orthogonal")
                )
                gamma_hd = fit_gamma_hd(data, hd_design, entropy, tau1)
                config = SoftCalibConfig(tau1=tau1, tau2=tau2)
                solution, weights = soft_solve(
                    data, basis, rp_fit, entropy, q, gamma_hd, config, design=hd_design
                )
                est = gec_hd_estimate(data, weights, hd_design, gamma_hd)
                records[name] = _RepRecord(
                    theta=est.theta_hat,
                    v_hat=est.v_hat,
                    ci_lo=est.ci[0],
                    ci_hi=est.ci[1],
                    residual=solution.kkt_residual,
                    ok=True,
                )
            except SOLVER_ERRORS:
                pass
        rows.append((b, records))
    return rows


def nhanes_like_study(
    design: NhanesLikeDesign | None = None,
    n_reps: int = 100,
    roster=NHANES_ROSTER,
    threads: int = 1,
    rp_penalty: float | None = None,
    tau1: float | None = None,
    tau2: float | None = None,
) -> SimSummary:
    """Fixed-population missingness study at survey scale; reports the same
    bias/RMSE summary rows as the factorial harness."""
    if design is None:
        design = NhanesLikeDesign()
    x, y, pi_true = design.build_population()
    n, p = x.shape
    n_resp = design.response_rate * n
    if rp_penalty is None:
        rp_penalty = 0.25 * math.sqrt(math.log(p) / n_resp)
    if tau1 is None or tau2 is None:
        t1, t2 = default_taus(max(int(n_resp), 2), p)
        tau1 = t1 if tau1 is None else tau1
        tau2 = t2 if tau2 is None else tau2
    theta = float(y.mean())
    roster = tuple(roster)
    reps = list(range(n_reps))
    collected: dict[int, dict] = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_nhanes_chunk, design, roster, chunk, rp_penalty, tau1, tau2)
                for chunk in _chunked(reps, threads * 2)
            ]
            for fut in futures:
                for b, records in fut.result():
                    collected[b] = records
    else:
        for b, records in _nhanes_chunk(design, roster, reps, rp_penalty, tau1, tau2):
            collected[b] = records
    return _summarize("NHANES-like", theta, n_reps, roster, collected, n)
