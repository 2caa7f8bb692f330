"""Soft calibration for high-dimensional covariates.

Exact constraints keep the weight normalization, the debiasing covariate,
and the fitted regression direction balanced; the remaining covariates are
only box-balanced to tolerance tau2, which turns into an L1 penalty on their
dual multipliers.  The dual is minimized by monotone FISTA with restarts,
followed by a Newton polish on the three unpenalized multipliers.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data_model import ObservedData, QWeights
from .entropy import EntropySpec, LinkRangeError
from .gec_core import (
    AugmentedDesign,
    CalibrationWeights,
    GecEstimate,
    InfeasibleCalibration,
    NonConvergence,
    build_design,
    norm_quantile,
)
from .propensity import PropensityFit
from .regression import RegressionFit, fit_lasso_weighted

__all__ = [
    "SoftCalibConfig",
    "SoftDualSolution",
    "default_taus",
    "soft_solve",
    "gec_hd_estimate",
    "fit_gamma_hd",
]


@dataclass(frozen=True)
class SoftCalibConfig:
    tau1: float
    tau2: float
    max_iter: int = 20000
    tol: float = 1e-8

    def __post_init__(self):
        if self.tau1 < 0 or self.tau2 < 0:
            raise ValueError("tau1 and tau2 must be nonnegative")


@dataclass(frozen=True)
class SoftDualSolution:
    lam1: float                 # normalization multiplier
    lam2: float                 # debiasing multiplier
    lam3: float                 # projection-direction multiplier
    lam4: np.ndarray            # soft-balance block
    kkt_residual: float
    iterations: int = 0
    objective_history: np.ndarray | None = None


def default_taus(n: int, p: int, s_guess: int | None = None, c1: float = 0.5, c2: float = 0.5):
    """Rate-based defaults tau1 = c1 sqrt(log(p)/n), tau2 = c2 sqrt(s log(p)/n).

    The sparsity hint ``s_guess`` defaults to ceil(sqrt(p)); it is never
    inferred from data.
    """
    if n < 1 or p < 1:
        raise ValueError("n and p must be at least 1")
    if s_guess is None:
        s_guess = int(math.ceil(math.sqrt(p)))
    tau1 = c1 * math.sqrt(math.log(p) / n)
    tau2 = c2 * math.sqrt(s_guess * math.log(p) / n)
    return tau1, tau2


def fit_gamma_hd(
    data: ObservedData,
    design: AugmentedDesign,
    entropy: EntropySpec,
    tau1: float,
) -> RegressionFit:
    """Lasso direction for projection calibration, weighted by q/g'(1/pi)."""
    inv_pi = 1.0 / design.pi_hat
    weight = design.q.values / entropy.g_second(inv_pi)
    return fit_lasso_weighted(design.z, data.outcome, data.responded, weight, tau1)


def _hd_dual_design(design: AugmentedDesign, gamma_hd: np.ndarray):
    """Columns of the soft dual: [1, debias, z'gamma, centered u-block]."""
    if design.debias_col is None or not design.ortho_cols:
        raise ValueError("soft calibration needs the full design (balance, debias, orthogonal)")
    n_units = design.z.shape[0]
    u_cols = tuple(design.basis_cols) + tuple(design.ortho_cols)
    u = design.z[:, u_cols]
    u_centered = u - u.mean(axis=0)
    debias = design.z[:, design.debias_col]
    proj = design.z @ gamma_hd
    dual_design = np.column_stack([np.ones(n_units), debias, proj, u_centered])
    targets = np.concatenate([
        [float(n_units), float(debias.sum()), float(proj.sum())],
        np.zeros(u_centered.shape[1]),
    ])
    return dual_design, targets


def soft_solve(
    data: ObservedData,
    basis: np.ndarray,
    fit_l1: PropensityFit,
    entropy: EntropySpec,
    q: QWeights,
    gamma_hd: RegressionFit,
    config: SoftCalibConfig,
    design: AugmentedDesign | None = None,
):
    """Solve the soft calibration program; returns (SoftDualSolution, weights).

    Exact constraints (normalization, debias, projection) are driven below
    ``config.tol``; the soft block satisfies the box bound tau2 through the
    L1 dual penalty, with complementary slackness at active coordinates.
    """
    if design is None:
        design = build_design(data, basis, fit_l1, entropy, q, ("balance", "debias", "orthogonal"))
    dual_design, targets = _hd_dual_design(design, gamma_hd.coef)
    resp = design.responded
    d_resp = dual_design[resp]
    q_resp = design.q.values[resp]
    n_units = dual_design.shape[0]
    n_soft = dual_design.shape[1] - 3
    tau2 = config.tau2

    # sanity check at the starting weights 1/pi: huge violations relative to
    # tau2 usually mean the bound is unattainably tight
    w0 = 1.0 / design.pi_hat[resp]
    viol0 = float(np.max(np.abs(d_resp[:, 3:].T @ w0 - targets[3:]))) / n_units
    if tau2 > 0 and viol0 > 50.0 * tau2:
        warnings.warn(
            f"soft bound tau2={tau2:.3e} is far below the starting violation "
            f"{viol0:.3e}; the program may be (near) infeasible",
            RuntimeWarning,
            stacklevel=2,
        )

    def smooth(lam):
        nu = (d_resp @ lam) * q_resp
        value = (np.sum(entropy.conjugate(nu) / q_resp) - lam @ targets) / n_units
        return value, nu

    def grad_smooth(nu):
        return (d_resp.T @ entropy.g_inverse(nu) - targets) / n_units

    def objective(lam, sval):
        return sval + tau2 * float(np.sum(np.abs(lam[3:])))

    def try_smooth(lam):
        try:
            return smooth(lam)
        except LinkRangeError:
            return None, None

    def prox(vec, step_pen):
        out = vec.copy()
        tail = out[3:]
        out[3:] = np.sign(tail) * np.maximum(np.abs(tail) - step_pen, 0.0)
        return out

    # start at weights 1/pi: lam2 = 1 reproduces them through the debias column
    lam = np.zeros(3 + n_soft)
    lam[1] = 1.0
    sval, nu = smooth(lam)
    fval = objective(lam, sval)
    lip = 1.0
    t_momentum = 1.0
    y_point = lam.copy()
    y_sval, y_nu = sval, nu
    history = [fval]
    iterations = 0

    for iterations in range(1, config.max_iter + 1):
        g = grad_smooth(y_nu)
        accepted = None
        for _ in range(60):
            cand = prox(y_point - g / lip, tau2 / lip)
            c_sval, c_nu = try_smooth(cand)
            if c_sval is None:
                lip *= 2.0
                continue
            diff = cand - y_point
            quad = y_sval + g @ diff + 0.5 * lip * float(diff @ diff)
            if c_sval <= quad + 1e-15 * abs(quad):
                accepted = (cand, c_sval, c_nu)
                break
            lip *= 2.0
        if accepted is None:
            raise InfeasibleCalibration(
                "soft dual step collapsed at the feasible boundary; "
                "constraints appear unattainable"
            )
        cand, c_sval, c_nu = accepted
        c_fval = objective(cand, c_sval)
        if c_fval <= fval:
            new_lam, new_fval, new_sval, new_nu = cand, c_fval, c_sval, c_nu
        else:
            # monotone variant: keep the best iterate, restart momentum
            new_lam, new_fval, new_sval, new_nu = lam, fval, sval, nu
            t_momentum = 1.0
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_momentum**2))
        y_point = new_lam + ((t_momentum - 1.0) / t_next) * (new_lam - lam)
        y_sval, y_nu = try_smooth(y_point)
        if y_sval is None:
            y_point = new_lam.copy()
            y_sval, y_nu = new_sval, new_nu
            t_next = 1.0
        lam, fval, sval, nu = new_lam, new_fval, new_sval, new_nu
        t_momentum = t_next
        history.append(fval)
        lip = max(lip / 1.5, 1e-10)

        if iterations % 25 == 0 or iterations == config.max_iter:
            res = _kkt_state(lam, grad_smooth(nu), tau2)
            if res.exact <= config.tol and res.soft <= max(10.0 * config.tol, 1e-7):
                break

    # Newton polish on the unpenalized block, alternated with prox passes on
    # the soft block, to push exact residuals to solver tolerance
    lam, sval, nu, fval, polish_hist = _polish(
        lam, smooth, grad_smooth, objective, try_smooth, prox,
        d_resp, q_resp, entropy, tau2, config, n_units,
    )
    history.extend(polish_hist)

    g_final = grad_smooth(nu)
    state = _kkt_state(lam, g_final, tau2)
    if state.exact > 10.0 * max(config.tol, 1e-9):
        raise NonConvergence(
            f"soft calibration stalled with exact-constraint residual {state.exact:.3e}",
            grad_norm=state.exact,
            iterations=iterations,
        )
    omega = entropy.g_inverse(nu)
    weights = CalibrationWeights(omega=omega, initial=w0)
    solution = SoftDualSolution(
        lam1=float(lam[0]),
        lam2=float(lam[1]),
        lam3=float(lam[2]),
        lam4=lam[3:].copy(),
        kkt_residual=float(max(state.exact, state.soft)),
        iterations=iterations,
        objective_history=np.asarray(history),
    )
    return solution, weights


class _KktState:
    __slots__ = ("exact", "soft")

    def __init__(self, exact, soft):
        self.exact = exact
        self.soft = soft


def _kkt_state(lam, grad, tau2):
    exact = float(np.max(np.abs(grad[:3])))
    soft_grad = grad[3:]
    active = lam[3:] != 0.0
    viol = np.where(
        active,
        np.abs(soft_grad + tau2 * np.sign(lam[3:])),
        np.maximum(np.abs(soft_grad) - tau2, 0.0),
    )
    soft = float(np.max(viol)) if viol.size else 0.0
    return _KktState(exact, soft)


def _polish(lam, smooth, grad_smooth, objective, try_smooth, prox,
            d_resp, q_resp, entropy, tau2, config, n_units):
    history = []
    sval, nu = smooth(lam)
    fval = objective(lam, sval)
    for _ in range(200):
        # Newton on the exact block (coordinates 0..2)
        for _ in range(40):
            g = grad_smooth(nu)
            if np.max(np.abs(g[:3])) <= 0.1 * config.tol:
                break
            curv = entropy.inverse_link_deriv(nu) * q_resp
            block = d_resp[:, :3]
            hess = (block * curv[:, None]).T @ block / n_units
            try:
                step = np.linalg.solve(hess, -g[:3])
            except np.linalg.LinAlgError:
                step = -g[:3]
            t = 1.0
            moved = False
            for _ in range(60):
                cand = lam.copy()
                cand[:3] += t * step
                c_sval, c_nu = try_smooth(cand)
                if c_sval is not None and c_sval <= sval + 1e-15 * abs(sval):
                    lam, sval, nu = cand, c_sval, c_nu
                    moved = True
                    break
                t *= 0.5
            if not moved:
                break
        new_fval = objective(lam, sval)
        if new_fval <= fval:
            fval = new_fval
            history.append(fval)
        # one prox pass on the soft block
        g = grad_smooth(nu)
        lip = 1.0
        improved = False
        for _ in range(60):
            cand = prox(lam - g / lip, tau2 / lip)
            cand[:3] = lam[:3]
            c_sval, c_nu = try_smooth(cand)
            if c_sval is None:
                lip *= 2.0
                continue
            c_fval = objective(cand, c_sval)
            if c_fval <= fval + 1e-15 * abs(fval):
                if c_fval < fval:
                    improved = True
                lam, sval, nu, fval = cand, c_sval, c_nu, c_fval
                history.append(fval)
                break
            lip *= 2.0
        g = grad_smooth(nu)
        state = _kkt_state(lam, g, tau2)
        if state.exact <= config.tol and state.soft <= max(config.tol, 1e-8) and not improved:
            break
    return lam, sval, nu, fval, history


def gec_hd_estimate(
    data: ObservedData,
    weights: CalibrationWeights,
    design: AugmentedDesign,
    gamma_hd: RegressionFit,
    level: float = 0.95,
) -> GecEstimate:
    """Point estimate, variance, and interval for the soft-calibrated weights.

    Influence values use the lasso direction: eta_i = d_i w_i y_i +
    (1 - d_i w_i) z_i' gamma_hd.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must be in (0, 1)")
    resp = data.responded
    n_units = data.n_units
    d_omega = weights.expanded(resp)
    y_filled = np.where(resp, data.outcome, 0.0)
    pred = design.z @ gamma_hd.coef
    eta = d_omega * y_filled + (1.0 - d_omega) * pred
    theta_hat = float(np.sum(d_omega * y_filled) / n_units)
    eta_bar = eta.mean()
    v_hat = float(np.sum((eta - eta_bar) ** 2) / (n_units - 1))
    half = norm_quantile(1.0 - (1.0 - level) / 2.0) * math.sqrt(v_hat / n_units)
    return GecEstimate(
        theta_hat=theta_hat,
        v_hat=v_hat,
        ci=(theta_hat - half, theta_hat + half),
        eta=eta,
        gamma=gamma_hd,
        level=level,
    )
