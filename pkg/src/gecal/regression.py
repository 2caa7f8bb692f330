"""Outcome-regression machinery: weighted least squares and weighted lasso.

All unpenalized fits go through a single pivoted-QR engine that detects rank
deficiency.  Columns that are exactly zero on the responded units get a zero
coefficient instead of an error: they cannot affect predictions, and keeping
them well-defined makes estimators exactly invariant to padding the basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "RegressionFit",
    "fit_weighted_ls",
    "fit_gls",
    "fit_q_weighted",
    "fit_gamma_hat",
    "fit_lasso_weighted",
]

RANK_RTOL = 1e-10


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray          # fitted coefficients, one per design column
    weights_used: np.ndarray  # per-unit regression weights over all N units
    residuals: np.ndarray     # y - X @ coef over responded units only


def fit_weighted_ls(design: np.ndarray, y: np.ndarray, delta: np.ndarray, w: np.ndarray) -> RegressionFit:
    """Solve sum_i delta_i w_i (y_i - x_i'b)^2 -> min by pivoted QR.

    Raises on genuinely collinear designs, naming the offending columns.
    """
    delta = np.asarray(delta, dtype=bool)
    xr = np.asarray(design, dtype=float)[delta]
    yr = np.asarray(y, dtype=float)[delta]
    wr = np.asarray(w, dtype=float)[delta]
    if np.any(wr <= 0) or np.any(~np.isfinite(wr)):
        raise ValueError("regression weights must be positive and finite")
    p = xr.shape[1]

    zero = np.max(np.abs(xr), axis=0) == 0.0
    active = np.flatnonzero(~zero)
    coef = np.zeros(p)
    if active.size:
        root_w = np.sqrt(wr)
        a = xr[:, active] * root_w[:, None]
        b = yr * root_w
        q, r, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol = RANK_RTOL * (diag[0] if diag.size else 0.0)
        rank = int(np.sum(diag > tol))
        if rank < active.size:
            dropped = active[piv[rank:]]
            raise ValueError(
                f"design is rank deficient: columns {sorted(int(j) for j in dropped)} "
                "are collinear with earlier columns"
            )
        sol = scipy.linalg.solve_triangular(r, q.T @ b)
        coef[active[piv]] = sol
    resid = yr - xr @ coef
    return RegressionFit(coef=coef, weights_used=np.asarray(w, dtype=float), residuals=resid)


def fit_gls(basis: np.ndarray, y: np.ndarray, delta: np.ndarray, v_tilde: np.ndarray) -> RegressionFit:
    """Generalized least squares with known variance profile v_tilde > 0."""
    v = np.asarray(v_tilde, dtype=float)
    if np.any(v <= 0):
        raise ValueError("v_tilde must be strictly positive")
    return fit_weighted_ls(basis, y, delta, 1.0 / v)


def fit_q_weighted(basis: np.ndarray, y: np.ndarray, delta: np.ndarray, q: np.ndarray) -> RegressionFit:
    """Least squares weighted by the q-function values."""
    return fit_weighted_ls(basis, y, delta, np.asarray(q, dtype=float))


def fit_gamma_hat(z_matrix, y, delta, entropy, weights, q) -> RegressionFit:
    """Regression of y on the augmented calibration covariates z.

    The per-unit weight is q_i / g'(omega_i), evaluated at the calibrated
    weights of the responded units; it makes the fitted coefficients the
    stationary point of the weighted normal equations on z.
    """
    delta = np.asarray(delta, dtype=bool)
    omega = np.asarray(weights.omega, dtype=float)
    if omega.shape[0] != int(delta.sum()):
        raise ValueError("calibration weights must cover exactly the responded units")
    gsec = entropy.g_second(omega)
    if np.any(gsec <= 0):
        raise ValueError("g' must be positive at the calibrated weights")
    qv = q.values if hasattr(q, "values") else np.asarray(q, dtype=float)
    w_full = np.ones(len(delta))
    w_full[delta] = qv[delta] / gsec
    return fit_weighted_ls(z_matrix, y, delta, w_full)


def _standardize(xr, wr):
    # weighted centering/scaling of non-intercept columns; intercept stays raw
    wsum = wr.sum()
    mean = (wr[:, None] * xr).sum(axis=0) / wsum
    mean[0] = 0.0
    centered = xr - mean
    scale = np.sqrt((wr[:, None] * centered**2).sum(axis=0) / wsum)
    scale[0] = 1.0
    scale[scale == 0.0] = 1.0
    return centered / scale, mean, scale


def fit_lasso_weighted(
    z_matrix,
    y,
    delta,
    per_unit_weight,
    tau1: float,
    max_sweeps: int = 2000,
    tol: float = 1e-7,
) -> RegressionFit:
    """Weighted lasso on the augmented design, intercept unpenalized.

    Minimizes (2N)^-1 sum_i delta_i w_i (y_i - z_i'g)^2 + tau1 * |g_{2:}|_1 by
    cyclic coordinate descent on internally standardized columns.  At the
    solution every zeroed coordinate satisfies |N^-1 sum delta w z_j r| <=
    tau1 + tol and every active one meets the sign condition to the same
    tolerance.
    """
    if tau1 < 0:
        raise ValueError("tau1 must be nonnegative")
    delta = np.asarray(delta, dtype=bool)
    z_full = np.asarray(z_matrix, dtype=float)
    xr = z_full[delta]
    yr = np.asarray(y, dtype=float)[delta]
    w_all = np.asarray(per_unit_weight, dtype=float)
    wr = w_all[delta]
    if np.any(wr <= 0) or np.any(~np.isfinite(wr)):
        raise ValueError("per-unit weights must be positive and finite")
    n_units = len(delta)
    p = xr.shape[1]

    xs, mean, scale = _standardize(xr, wr)
    # gram quantities in the weighted metric, normalized by N
    col_norm = (wr[:, None] * xs**2).sum(axis=0) / n_units
    col_norm[col_norm == 0.0] = 1.0

    gamma_s = np.zeros(p)
    # warm start the intercept at the weighted mean
    gamma_s[0] = np.dot(wr, yr) / wr.sum()
    resid = yr - xs @ gamma_s

    def kkt(gamma_vec, res):
        grad = (wr * res) @ xs / n_units
        out = abs(grad[0])
        for j in range(1, p):
            if gamma_vec[j] != 0.0:
                out = max(out, abs(grad[j] - tau1 * np.sign(gamma_vec[j])))
            else:
                out = max(out, max(abs(grad[j]) - tau1, 0.0))
        return out

    last = np.inf
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(p):
            old = gamma_s[j]
            rho = np.dot(wr * xs[:, j], resid) / n_units + col_norm[j] * old
            if j == 0:
                new = rho / col_norm[j]
            else:
                new = np.sign(rho) * max(abs(rho) - tau1, 0.0) / col_norm[j]
            if new != old:
                resid -= xs[:, j] * (new - old)
                gamma_s[j] = new
                biggest = max(biggest, abs(new - old))
        last = kkt(gamma_s, resid)
        if last <= tol and biggest <= tol:
            break
    else:
        raise RuntimeError(
            f"weighted lasso did not converge in {max_sweeps} sweeps "
            f"(KKT residual {last:.3e})"
        )

    # back-transform to the original column scale
    coef = gamma_s / scale
    coef[0] = gamma_s[0] - np.dot(mean / scale, gamma_s)
    resid_out = yr - xr @ coef
    return RegressionFit(coef=coef, weights_used=w_all, residuals=resid_out)
