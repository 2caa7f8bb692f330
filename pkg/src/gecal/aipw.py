"""Baseline estimators: IPW, the q-indexed AIPW family, and q selection."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data_model import ObservedData, QWeights
from .propensity import PropensityFit
from .regression import fit_q_weighted

__all__ = [
    "BaselineEstimate",
    "ipw_estimate",
    "aipw_estimate",
    "empirical_loss",
    "select_kappa",
]

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class BaselineEstimate:
    theta_hat: float
    method: str                 # "ipw" or "aipw"
    kappa: float | None
    delta_b: np.ndarray         # response-weighted minus population basis means


def _delta_b(data: ObservedData, fit: PropensityFit, basis: np.ndarray) -> np.ndarray:
    resp = data.responded
    n_units = data.n_units
    weighted = basis[resp].T @ (1.0 / fit.pi_hat[resp]) / n_units
    return weighted - basis.mean(axis=0)


def ipw_estimate(data: ObservedData, fit: PropensityFit) -> BaselineEstimate:
    """Inverse probability weighted mean N^-1 sum d_i y_i / pi_i."""
    resp = data.responded
    pi_resp = fit.pi_hat[resp]
    if np.any(pi_resp <= 1e-12):
        raise ValueError("fitted propensity is numerically zero on a responded unit")
    theta = float(np.sum(data.observed_outcome / pi_resp) / data.n_units)
    return BaselineEstimate(
        theta_hat=theta,
        method="ipw",
        kappa=None,
        delta_b=_delta_b(data, fit, np.ones((data.n_units, 1))),
    )


def aipw_estimate(
    data: ObservedData,
    fit: PropensityFit,
    basis: np.ndarray,
    q: QWeights,
) -> BaselineEstimate:
    """Augmented IPW: IPW term plus the regression rectifier on the basis.

    The regression coefficient solves the q-weighted estimating equations on
    the responded units; any positive q leaves the estimator doubly robust
    and only moves its variance.
    """
    resp = data.responded
    pi_resp = fit.pi_hat[resp]
    if np.any(pi_resp <= 1e-12):
        raise ValueError("fitted propensity is numerically zero on a responded unit")
    # identically-zero columns contribute nothing; excluding them up front
    # keeps the estimate exactly invariant to basis padding
    basis = np.asarray(basis, dtype=float)
    active = np.flatnonzero(np.max(np.abs(basis), axis=0) > 0.0)
    working = basis[:, active]
    beta = fit_q_weighted(working, data.outcome, resp, q.values).coef
    n_units = data.n_units
    ipw_term = float(np.sum(data.observed_outcome / pi_resp) / n_units)
    gap = working.mean(axis=0) - working[resp].T @ (1.0 / pi_resp) / n_units
    theta = ipw_term + float(gap @ beta)
    return BaselineEstimate(
        theta_hat=theta,
        method="aipw",
        kappa=q.kappa,
        delta_b=_delta_b(data, fit, basis),
    )


def empirical_loss(
    data: ObservedData,
    fit: PropensityFit,
    basis: np.ndarray,
    kappa: float,
    v_tilde: np.ndarray,
) -> float:
    """Empirical variance-proxy loss for the q-exponent kappa.

    L(kappa) = N^-1 sum_resp { 1/pi_i - Delta_b' M(kappa)^-1 q_i(kappa) b_i }^2 vtilde_i
    with M(kappa) = N^-1 sum_resp q_i(kappa) b_i b_i'.
    """
    resp = data.responded
    n_units = data.n_units
    q_resp = fit.pi_hat[resp] ** (kappa - 1.0)
    b_resp = basis[resp]
    m_q = (b_resp * q_resp[:, None]).T @ b_resp / n_units
    delta_b = _delta_b(data, fit, basis)
    try:
        mdelta = np.linalg.solve(m_q, delta_b)
    except np.linalg.LinAlgError:
        raise ValueError(f"singular moment matrix at kappa={kappa:g}") from None
    core = 1.0 / fit.pi_hat[resp] - (b_resp @ mdelta) * q_resp
    v = np.asarray(v_tilde, dtype=float)
    if v.shape[0] == n_units:
        v = v[resp]
    return float(np.sum(core**2 * v) / n_units)


def _residual_v_tilde(data, fit, basis, kappa):
    """Squared residuals from the regression augmented with 1/(q*pi)."""
    resp = data.responded
    q_vals = fit.pi_hat ** (kappa - 1.0)
    aug = np.column_stack([basis, 1.0 / (q_vals * fit.pi_hat)])
    gamma = fit_q_weighted(aug, data.outcome, resp, q_vals).coef
    return (data.observed_outcome - aug[resp] @ gamma) ** 2


def select_kappa(
    data: ObservedData,
    fit: PropensityFit,
    basis: np.ndarray,
    v_mode: str = "unit",
    grid=None,
    refine_tol: float = 1e-4,
) -> float:
    """Minimize the empirical loss over kappa: grid search then golden section.

    ``v_mode`` chooses the variance proxy: "unit" uses vtilde = 1,
    "residual" uses squared residuals from the augmented regression at each
    kappa.  Grid points where the loss is not computable are skipped with a
    warning; exact ties prefer kappa = 1.
    """
    if v_mode not in ("unit", "residual"):
        raise ValueError("v_mode must be 'unit' or 'residual'")
    if grid is None:
        grid = np.round(np.arange(-1.0, 3.0 + 1e-9, 0.1), 10)
    grid = np.asarray(grid, dtype=float)

    def loss(kappa):
        if v_mode == "unit":
            v = np.ones(data.n_responded)
        else:
            v = _residual_v_tilde(data, fit, basis, kappa)
        return empirical_loss(data, fit, basis, kappa, v)

    values = np.full(grid.shape, np.nan)
    skipped = 0
    for i, kappa in enumerate(grid):
        try:
            values[i] = loss(float(kappa))
        except (ValueError, np.linalg.LinAlgError):
            skipped += 1
    if skipped:
        warnings.warn(
            f"empirical loss unavailable at {skipped} grid points",
            RuntimeWarning,
            stacklevel=2,
        )
    if np.all(np.isnan(values)):
        raise ValueError("empirical loss failed on the whole kappa grid")
    finite = np.where(np.isnan(values), np.inf, values)
    best = int(np.argmin(finite))
    ties = np.flatnonzero(np.abs(finite - finite[best]) <= 1e-12 * max(1.0, abs(finite[best])))
    if ties.size > 1:
        best = int(ties[np.argmin(np.abs(grid[ties] - 1.0))])

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    if hi - lo < refine_tol:
        return float(grid[best])

    # golden-section refinement inside the bracketing grid cell
    a, b = float(lo), float(hi)
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    try:
        f1, f2 = loss(x1), loss(x2)
        while b - a > refine_tol:
            if f1 <= f2:
                b, x2, f2 = x2, x1, f1
                x1 = b - GOLDEN * (b - a)
                f1 = loss(x1)
            else:
                a, x1, f1 = x1, x2, f2
                x2 = a + GOLDEN * (b - a)
                f2 = loss(x2)
    except (ValueError, np.linalg.LinAlgError):
        return float(grid[best])
    return float(0.5 * (a + b))
