"""Working response-propensity model: logistic fit, gradient, L1 variant."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data_model import ObservedData

__all__ = [
    "PropensityFit",
    "SeparationWarning",
    "fit_logistic",
    "fit_logistic_l1",
    "pi_gradient",
    "cross_validate_penalty",
]

# |linear predictor| beyond this at convergence signals (quasi-)separation.
SEPARATION_BOUND = 30.0
# Keeps fitted probabilities strictly inside (0, 1) even under separation.
PROB_FLOOR = 1e-12


class SeparationWarning(UserWarning):
    """The response indicator is (nearly) separated by the linear predictor."""


@dataclass(frozen=True)
class PropensityFit:
    """Fitted response-propensity model.

    ``pi_hat`` holds fitted response probabilities for every unit, strictly
    inside (0, 1).  ``rp_columns`` records which covariate columns (0-based)
    entered after the automatic intercept.
    """

    phi_hat: np.ndarray       # (d,) coefficients, intercept first
    pi_hat: np.ndarray        # (N,) fitted probabilities
    rp_columns: tuple[int, ...]
    regularized: bool = False
    penalty: float = 0.0

    def design(self, data: ObservedData) -> np.ndarray:
        """Intercept-augmented RP design matrix (N, d)."""
        return _rp_design(data, self.rp_columns)


def _rp_design(data: ObservedData, rp_columns) -> np.ndarray:
    cols = [np.ones(data.n_units)]
    for j in rp_columns:
        cols.append(data.covariates[:, int(j)])
    return np.column_stack(cols)


def _clip_probs(lp):
    return np.clip(expit(lp), PROB_FLOOR, 1.0 - PROB_FLOOR)


def fit_logistic(data: ObservedData, rp_columns) -> PropensityFit:
    """Maximum likelihood logistic fit of the response indicator.

    Newton-Raphson with step halving, run until the mean score
    N^-1 sum (delta_i - pi_i) x_i is below 1e-10 in every coordinate.
    Raises on rank-deficient designs; (quasi-)separation only warns, because
    calibration downstream may still be well posed.
    """
    x = _rp_design(data, rp_columns)
    delta = data.responded.astype(float)
    n_units, d = x.shape
    if np.linalg.matrix_rank(x) < d:
        raise ValueError("response-propensity design is rank deficient")

    phi = np.zeros(d)
    base_rate = min(max(delta.mean(), PROB_FLOOR), 1.0 - PROB_FLOOR)
    phi[0] = np.log(base_rate / (1.0 - base_rate))

    def mean_score(lp):
        return x.T @ (delta - expit(lp)) / n_units

    lp = x @ phi
    score = mean_score(lp)
    converged = False
    for _ in range(50):
        if np.max(np.abs(score)) <= 1e-10:
            converged = True
            break
        w = expit(lp) * (1.0 - expit(lp))
        hess = (x * w[:, None]).T @ x / n_units
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step = score
        # halve until the score norm improves; logistic NLL is convex so this
        # cannot cycle
        best = np.max(np.abs(score))
        scale = 1.0
        for _ in range(40):
            cand = phi + scale * step
            cand_score = mean_score(x @ cand)
            if np.max(np.abs(cand_score)) < best or scale < 1e-12:
                phi, score, lp = cand, cand_score, x @ cand
                break
            scale *= 0.5
        else:
            break

    degenerate = delta.all() or not delta.any()
    if degenerate or np.max(np.abs(lp)) > SEPARATION_BOUND or (
        not converged and np.max(np.abs(score)) > 1e-8
    ):
        warnings.warn(
            "response indicator is (nearly) separated; propensity estimates "
            "are at the boundary of the parameter space",
            SeparationWarning,
            stacklevel=2,
        )
    return PropensityFit(
        phi_hat=phi,
        pi_hat=_clip_probs(lp),
        rp_columns=tuple(int(j) for j in rp_columns),
    )


def pi_gradient(fit: PropensityFit, data: ObservedData, i: int | None = None) -> np.ndarray:
    """d pi / d phi for the logistic link: pi*(1-pi)*x, per unit.

    Returns the (d,) gradient for unit ``i``, or the full (N, d) matrix when
    ``i`` is None.
    """
    x = fit.design(data)
    w = fit.pi_hat * (1.0 - fit.pi_hat)
    grad = x * w[:, None]
    if i is None:
        return grad
    return grad[int(i)]


def _nll(delta, lp):
    # -loglik/N via the numerically stable log1p(exp(.)) form
    return float(np.mean(np.logaddexp(0.0, lp) - delta * lp))


def fit_logistic_l1(
    data: ObservedData,
    penalty: float,
    rp_columns=None,
    max_sweeps: int = 1000,
    tol: float = 1e-6,
) -> PropensityFit:
    """L1-penalized logistic fit via coordinate descent, intercept unpenalized.

    Minimizes N^-1 sum[log(1+exp(lp_i)) - delta_i lp_i] + penalty * |phi_{2:}|_1
    with an IRLS outer loop and cyclic coordinate updates on the weighted
    least-squares surrogate.  Stops once the KKT residual is below ``tol``.
    """
    if penalty < 0:
        raise ValueError("penalty must be nonnegative")
    if rp_columns is None:
        rp_columns = range(data.covariates.shape[1])
    rp_columns = tuple(int(j) for j in rp_columns)
    x = _rp_design(data, rp_columns)
    delta = data.responded.astype(float)
    n_units, d = x.shape

    phi = np.zeros(d)
    base_rate = min(max(delta.mean(), PROB_FLOOR), 1.0 - PROB_FLOOR)
    phi[0] = np.log(base_rate / (1.0 - base_rate))
    lp = x @ phi

    def kkt_residual(phi_vec, lp_vec):
        grad = x.T @ (expit(lp_vec) - delta) / n_units
        res = abs(grad[0])
        for j in range(1, d):
            if phi_vec[j] != 0.0:
                res = max(res, abs(grad[j] + penalty * np.sign(phi_vec[j])))
            else:
                res = max(res, max(abs(grad[j]) - penalty, 0.0))
        return res

    last = np.inf
    for _ in range(max_sweeps):
        p = expit(lp)
        w = np.maximum(p * (1.0 - p), 1e-6)
        z = lp + (delta - p) / w
        # one full cyclic pass of penalized weighted least squares
        for j in range(d):
            r_j = z - lp + x[:, j] * phi[j]
            rho = np.dot(w * x[:, j], r_j) / n_units
            denom = np.dot(w, x[:, j] ** 2) / n_units
            if j == 0:
                new = rho / denom
            else:
                new = np.sign(rho) * max(abs(rho) - penalty, 0.0) / denom
            if new != phi[j]:
                lp = lp + x[:, j] * (new - phi[j])
                phi[j] = new
        last = kkt_residual(phi, lp)
        if last <= tol:
            break
    else:
        raise RuntimeError(
            f"L1 logistic fit did not converge in {max_sweeps} sweeps "
            f"(KKT residual {last:.3e})"
        )
    return PropensityFit(
        phi_hat=phi,
        pi_hat=_clip_probs(lp),
        rp_columns=rp_columns,
        regularized=True,
        penalty=float(penalty),
    )


def cross_validate_penalty(
    data: ObservedData,
    rp_columns=None,
    n_folds: int = 5,
    n_grid: int = 20,
    seed: int = 0,
) -> float:
    """Pick the L1 penalty by 5-fold cross-validated deviance.

    The grid runs geometrically from the smallest penalty that zeroes every
    slope down by a factor of 1e-3.
    """
    if rp_columns is None:
        rp_columns = range(data.covariates.shape[1])
    rp_columns = tuple(int(j) for j in rp_columns)
    x = _rp_design(data, rp_columns)
    delta = data.responded.astype(float)
    n_units = data.n_units
    rate = delta.mean()
    # at the all-zero-slope solution the score of column j is mean(x_j*(delta - rate))
    lam_max = float(np.max(np.abs(x[:, 1:].T @ (delta - rate) / n_units)))
    lam_max = max(lam_max, 1e-6)
    grid = np.geomspace(lam_max, lam_max * 1e-3, n_grid)

    rng = np.random.default_rng(seed)
    fold = rng.permuted(np.arange(n_units) % n_folds)
    cv = np.zeros(n_grid)
    for k in range(n_folds):
        hold = fold == k
        train = ObservedData(
            covariates=data.covariates[~hold],
            outcome=data.outcome[~hold],
            responded=data.responded[~hold],
        )
        for g, lam in enumerate(grid):
            fit = fit_logistic_l1(train, lam, rp_columns=rp_columns)
            lp_hold = _rp_design(data, rp_columns)[hold] @ fit.phi_hat
            cv[g] += _nll(delta[hold], lp_hold) * hold.sum()
    return float(grid[int(np.argmin(cv))])
