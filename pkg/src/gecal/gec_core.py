"""Core calibration engine: augmented design, dual solve, weights, estimate.

The weights minimize sum_i delta_i G(w_i)/q_i subject to linear calibration
constraints sum_i delta_i w_i z_i = sum_i z_i.  The solver works on the
convex dual

    rho(lam) = N^-1 [ sum_i delta_i q_i^-1 F(off_i + lam'z_i q_i) - lam' sum_i z_i ]

whose gradient is exactly the calibration residual; ``off`` is zero for the
plain program and g(w0_i) when projecting from a general starting weight.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data_model import ObservedData, QWeights
from .entropy import EntropySpec, DomainError, LinkRangeError
from .propensity import PropensityFit, pi_gradient
from .regression import RegressionFit, fit_gamma_hat

__all__ = [
    "InfeasibleCalibration",
    "NonConvergence",
    "AugmentedDesign",
    "DualSolution",
    "CalibrationWeights",
    "GecEstimate",
    "build_design",
    "dual_objective",
    "solve_dual",
    "recover_weights",
    "constraint_residuals",
    "gec_estimate",
    "select_kappa_gec",
    "norm_quantile",
    "KAPPA_GRID",
]

CONSTRAINT_NAMES = ("balance", "debias", "orthogonal")
GRAD_TOL = 1e-8
MAX_ITER = 200
FEAS_MARGIN = 1e-12
KAPPA_GRID = np.round(np.arange(-1.0, 3.0 + 1e-9, 0.1), 10)


class InfeasibleCalibration(RuntimeError):
    """No weight vector inside the entropy domain satisfies the constraints."""


class NonConvergence(RuntimeError):
    """Dual solver stalled; carries the last gradient norm and iterate count."""

    def __init__(self, message, grad_norm=None, iterations=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations


@dataclass(frozen=True)
class AugmentedDesign:
    """Calibration covariates z with optional debias/orthogonality blocks.

    Column layout: basis block, then the orthogonality block (one column per
    propensity coefficient), then the debias scalar column, for whichever
    blocks are switched on.  ``balance`` is always on.
    """

    z: np.ndarray                      # (N, k)
    included_constraints: tuple[str, ...]
    q: QWeights
    responded: np.ndarray              # (N,) bool
    basis_cols: tuple[int, ...]
    ortho_cols: tuple[int, ...]
    debias_col: int | None
    pi_hat: np.ndarray                 # (N,) fitted response probabilities

    @property
    def n_columns(self) -> int:
        return self.z.shape[1]

    def population_totals(self) -> np.ndarray:
        return self.z.sum(axis=0)


@dataclass(frozen=True)
class DualSolution:
    lam: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    line_search_backtracks: int


@dataclass(frozen=True)
class CalibrationWeights:
    """Calibrated weights over the responded units, with the starting weights."""

    omega: np.ndarray             # (n,) over responded units
    initial: np.ndarray | None    # (n,) starting weights, 1/pi_hat by default

    def expanded(self, responded: np.ndarray) -> np.ndarray:
        """(N,) vector equal to delta_i * omega_i (zero off the responded set)."""
        out = np.zeros(responded.shape[0])
        out[responded] = self.omega
        return out


@dataclass(frozen=True)
class GecEstimate:
    theta_hat: float
    v_hat: float
    ci: tuple[float, float]
    eta: np.ndarray               # (N,) influence values
    gamma: RegressionFit
    level: float


def build_design(
    data: ObservedData,
    basis: np.ndarray,
    fit: PropensityFit,
    entropy: EntropySpec,
    q: QWeights,
    constraints=("balance", "debias", "orthogonal"),
) -> AugmentedDesign:
    """Assemble the augmented calibration matrix for the requested constraints."""
    constraints = tuple(constraints)
    for c in constraints:
        if c not in CONSTRAINT_NAMES:
            raise ValueError(f"unknown constraint {c!r}; valid: {CONSTRAINT_NAMES}")
    if "balance" not in constraints:
        raise ValueError("the balance constraint is always required")
    basis = np.asarray(basis, dtype=float)
    if basis.shape[0] != data.n_units:
        raise ValueError("basis and data row counts differ")

    pi = fit.pi_hat
    inv_pi = 1.0 / pi
    lo, hi = entropy.domain
    bad = inv_pi <= lo + 1e-12
    if math.isfinite(hi):
        bad |= inv_pi >= hi - 1e-12
    if np.any(bad):
        unit = int(np.flatnonzero(bad)[0])
        raise DomainError(
            float(inv_pi[unit]),
            entropy.domain,
            f"{entropy.name}: 1/pi_hat of unit {unit} outside the weight domain",
        )

    inv_q = 1.0 / q.values
    blocks = [basis]
    basis_cols = tuple(range(basis.shape[1]))
    ortho_cols: tuple[int, ...] = ()
    if "orthogonal" in constraints:
        gp = entropy.g_second(inv_pi)
        block = -(gp * inv_pi**2 * inv_q)[:, None] * pi_gradient(fit, data)
        ortho_cols = tuple(range(basis.shape[1], basis.shape[1] + block.shape[1]))
        blocks.append(block)
    debias_col = None
    if "debias" in constraints:
        debias = entropy.debias_covariate(pi) * inv_q
        debias_col = sum(b.shape[1] for b in blocks)
        blocks.append(debias[:, None])
    z = np.hstack(blocks)
    return AugmentedDesign(
        z=z,
        included_constraints=constraints,
        q=q,
        responded=data.responded.copy(),
        basis_cols=basis_cols,
        ortho_cols=ortho_cols,
        debias_col=debias_col,
        pi_hat=pi.copy(),
    )


def _feasible(entropy, nu):
    lo, hi = entropy.link_range()
    ok = np.isfinite(nu)
    if math.isfinite(lo):
        ok &= nu > lo + FEAS_MARGIN
    if math.isfinite(hi):
        ok &= nu < hi - FEAS_MARGIN
    return bool(np.all(ok))


def dual_objective(design: AugmentedDesign, entropy: EntropySpec, lam, offset=None):
    """Value, gradient, and Hessian of the calibration generating function.

    The gradient equals the per-N calibration residual, the Hessian is the
    positive semidefinite curvature sum over responded units.
    """
    lam = np.asarray(lam, dtype=float)
    resp = design.responded
    z_resp = design.z[resp]
    q_resp = design.q.values[resp]
    n_units = design.z.shape[0]
    totals = design.population_totals()
    nu = z_resp @ lam * q_resp
    if offset is not None:
        nu = nu + offset
    lo, hi = entropy.link_range()
    bad = ~np.isfinite(nu)
    if math.isfinite(lo):
        bad |= nu <= lo + FEAS_MARGIN
    if math.isfinite(hi):
        bad |= nu >= hi - FEAS_MARGIN
    if np.any(bad):
        first = int(np.flatnonzero(bad)[0])
        unit = int(np.flatnonzero(resp)[first])
        raise LinkRangeError(
            float(nu[first]),
            entropy.link_range(),
            f"{entropy.name}: dual argument of unit {unit}",
        )
    value = (np.sum(entropy.conjugate(nu) / q_resp) - lam @ totals) / n_units
    f_nu = entropy.g_inverse(nu)
    grad = (z_resp.T @ f_nu - totals) / n_units
    curv = entropy.inverse_link_deriv(nu) * q_resp
    hess = (z_resp * curv[:, None]).T @ z_resp / n_units
    return value, grad, hess


def _initial_lambda(design, entropy, offset):
    """Feasible starting point on the original column scale.

    With a debias column present, lam_debias = 1 reproduces the starting
    weights 1/pi_hat exactly.  Otherwise lam = 0 is used when the link range
    allows it, else a constant-weight start through the intercept, shrunk
    until every dual argument is strictly feasible.
    """
    lam = np.zeros(design.n_columns)
    if offset is not None:
        return lam  # nu = g(w0), feasible by construction
    if design.debias_col is not None:
        lam[design.debias_col] = 1.0
        return lam
    lo, hi = entropy.link_range()
    if lo < 0.0 < hi:
        return lam
    resp = design.responded
    qr = design.q.values[resp]
    med = float(np.median(1.0 / design.pi_hat[resp]))
    target = entropy.g_deriv(med) / float(np.median(qr))
    for _ in range(60):
        lam[0] = target
        if _feasible(entropy, design.z[resp] @ lam * qr):
            return lam
        target *= 0.5
    raise InfeasibleCalibration(
        "no feasible starting dual point found; constraints may be unattainable"
    )


def _trivial_full_response(design, entropy):
    """Exact solution when every unit responded, q is constant, and the
    intercept column is present: weights are identically one."""
    if not np.all(design.responded):
        return None
    if not entropy.contains(1.0):
        return None
    qv = design.q.values
    if np.ptp(qv) != 0.0:
        return None
    first = design.z[:, design.basis_cols[0]]
    if np.any(first != 1.0):
        return None
    lam = np.zeros(design.n_columns)
    lam[design.basis_cols[0]] = entropy.g_deriv(1.0) / qv[0]
    value, grad, _ = dual_objective(design, entropy, lam)
    return DualSolution(
        lam=lam,
        objective=float(value),
        grad_norm=float(np.max(np.abs(grad))),
        iterations=0,
        line_search_backtracks=0,
    )


def solve_dual(
    design: AugmentedDesign,
    entropy: EntropySpec,
    init=None,
    offset=None,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
) -> DualSolution:
    """Damped Newton on the dual, restricted to the feasible region.

    Columns are rescaled to unit second moment internally for conditioning;
    the returned multipliers are on the original scale.  Convergence requires
    the max-norm of the per-N calibration residual to drop below ``tol`` on
    both the scaled and unscaled columns.
    """
    if offset is None:
        shortcut = _trivial_full_response(design, entropy)
        if shortcut is not None and shortcut.grad_norm <= tol:
            return shortcut

    scale = np.sqrt(np.mean(design.z**2, axis=0))
    scale[scale == 0.0] = 1.0
    scaled = AugmentedDesign(
        z=design.z / scale,
        included_constraints=design.included_constraints,
        q=design.q,
        responded=design.responded,
        basis_cols=design.basis_cols,
        ortho_cols=design.ortho_cols,
        debias_col=design.debias_col,
        pi_hat=design.pi_hat,
    )

    lam = None
    if init is not None:
        cand = np.asarray(init, dtype=float)
        resp = design.responded
        nu0 = design.z[resp] @ cand * design.q.values[resp]
        if offset is not None:
            nu0 = nu0 + offset
        if _feasible(entropy, nu0):
            lam = cand * scale
    if lam is None:
        lam = _initial_lambda(design, entropy, offset) * scale

    value, grad, hess = dual_objective(scaled, entropy, lam, offset)
    backtracks = 0
    iterations = 0
    stalled = 0
    for iterations in range(1, max_iter + 1):
        gn = max(np.max(np.abs(grad)), np.max(np.abs(grad * scale)))
        if gn <= tol:
            return DualSolution(
                lam=lam / scale,
                objective=float(value),
                grad_norm=float(gn),
                iterations=iterations - 1,
                line_search_backtracks=backtracks,
            )
        try:
            step = cho_solve(cho_factor(hess), -grad)
        except np.linalg.LinAlgError:
            step = -grad  # rank-deficient curvature: fall back to gradient
        except Exception:
            step = -grad
        t = 1.0
        accepted = False
        slope = float(grad @ step)
        if slope >= 0.0:
            step = -grad
            slope = -float(grad @ grad)
        for _ in range(80):
            cand = lam + t * step
            try:
                cval, cgrad, chess = dual_objective(scaled, entropy, cand, offset)
            except LinkRangeError:
                backtracks += 1
                t *= 0.5
                continue
            if cval <= value + 1e-4 * t * slope:
                lam, value, grad, hess = cand, cval, cgrad, chess
                accepted = True
                break
            backtracks += 1
            t *= 0.5
        if not accepted:
            gn = max(np.max(np.abs(grad)), np.max(np.abs(grad * scale)))
            raise InfeasibleCalibration(
                "line search collapsed at the feasible-region boundary "
                f"(residual {gn:.3e}); constraints appear unattainable"
            )
        # collapsing steps with dual arguments jammed against a finite link
        # endpoint mean a weight is driven to the edge of the entropy domain:
        # the open-domain program has no interior solution
        if t <= 1e-4:
            resp = scaled.responded
            nu = scaled.z[resp] @ lam * scaled.q.values[resp]
            if offset is not None:
                nu = nu + offset
            lo, hi = entropy.link_range()
            dist = math.inf
            if math.isfinite(lo):
                dist = min(dist, float(np.min(nu - lo)))
            if math.isfinite(hi):
                dist = min(dist, float(np.min(hi - nu)))
            stalled = stalled + 1 if dist <= 1e-8 else 0
            if stalled >= 5:
                gn = max(np.max(np.abs(grad)), np.max(np.abs(grad * scale)))
                raise InfeasibleCalibration(
                    "dual iterates are pinned at the feasible-region boundary "
                    f"(residual {gn:.3e}); a weight is driven to the edge of "
                    "the entropy domain and no interior solution exists"
                )
        else:
            stalled = 0
    gn = max(np.max(np.abs(grad)), np.max(np.abs(grad * scale)))
    if gn <= tol:
        return DualSolution(
            lam=lam / scale,
            objective=float(value),
            grad_norm=float(gn),
            iterations=iterations,
            line_search_backtracks=backtracks,
        )
    raise NonConvergence(
        f"dual solver stopped after {max_iter} iterations with residual {gn:.3e}",
        grad_norm=float(gn),
        iterations=iterations,
    )


def recover_weights(design, entropy, dual: DualSolution, offset=None) -> CalibrationWeights:
    """Map the dual solution back to primal weights over responded units."""
    resp = design.responded
    nu = design.z[resp] @ dual.lam * design.q.values[resp]
    if offset is not None:
        nu = nu + offset
    omega = entropy.g_inverse(nu)
    return CalibrationWeights(omega=omega, initial=1.0 / design.pi_hat[resp])


def constraint_residuals(design, weights: CalibrationWeights) -> np.ndarray:
    """Per-column calibration residual (sum_resp w z - sum z) / N."""
    resp = design.responded
    achieved = design.z[resp].T @ weights.omega
    return (achieved - design.population_totals()) / design.z.shape[0]


def gec_estimate(
    data: ObservedData,
    weights: CalibrationWeights,
    design: AugmentedDesign,
    entropy: EntropySpec,
    level: float = 0.95,
) -> GecEstimate:
    """Weighted point estimate with plug-in variance and normal interval.

    The variance estimate is (N-1)^-1 sum (eta_i - mean(eta))^2 over the
    stored influence values eta_i = d_i w_i y_i + (1 - d_i w_i) z_i' gamma,
    and the interval is theta_hat -/+ z_{a/2} sqrt(v_hat / N).
    """
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must be in (0, 1)")
    resp = data.responded
    n_units = data.n_units
    gamma = fit_gamma_hat(design.z, data.outcome, resp, entropy, weights, design.q)
    d_omega = weights.expanded(resp)
    y_filled = np.where(resp, data.outcome, 0.0)
    eta = d_omega * y_filled + (1.0 - d_omega) * (design.z @ gamma.coef)
    theta_hat = float(np.sum(d_omega * y_filled) / n_units)
    eta_bar = eta.mean()
    v_hat = float(np.sum((eta - eta_bar) ** 2) / (n_units - 1))
    half = norm_quantile(1.0 - (1.0 - level) / 2.0) * math.sqrt(v_hat / n_units)
    return GecEstimate(
        theta_hat=theta_hat,
        v_hat=v_hat,
        ci=(theta_hat - half, theta_hat + half),
        eta=eta,
        gamma=gamma,
        level=level,
    )


def select_kappa_gec(
    data: ObservedData,
    basis: np.ndarray,
    fit: PropensityFit,
    entropy: EntropySpec,
    v_mode: str = "unit",
    constraints=("balance", "debias"),
    grid=None,
) -> float:
    """Grid search for the q-weight exponent minimizing the weighted
    second-moment criterion sum_resp w_i(kappa)^2 * vtilde_i.

    The dual and the augmented regression are re-solved at every grid point
    because both depend on q.  Infeasible points are skipped; ties prefer
    kappa = 1 (unit weights).
    """
    if v_mode not in ("unit", "residual"):
        raise ValueError("v_mode must be 'unit' or 'residual'")
    if grid is None:
        grid = KAPPA_GRID
    resp = data.responded
    y_resp = data.observed_outcome
    best_kappa = None
    best_val = np.inf
    warm = None
    skipped = []
    for kappa in grid:
        q = QWeights.propensity_power(fit.pi_hat, float(kappa))
        try:
            design = build_design(data, basis, fit, entropy, q, constraints)
            dual = solve_dual(design, entropy, init=warm)
            weights = recover_weights(design, entropy, dual)
            if v_mode == "unit":
                v_tilde = np.ones(y_resp.shape[0])
            else:
                gamma = fit_gamma_hat(design.z, data.outcome, resp, entropy, weights, q)
                v_tilde = (y_resp - design.z[resp] @ gamma.coef) ** 2
            val = float(np.sum(weights.omega**2 * v_tilde))
        except (InfeasibleCalibration, NonConvergence, DomainError, LinkRangeError, ValueError):
            skipped.append(float(kappa))
            warm = None
            continue
        warm = dual.lam
        tol = 1e-12 * max(1.0, abs(best_val))
        if val < best_val - tol:
            best_val, best_kappa = val, float(kappa)
        elif abs(val - best_val) <= tol and best_kappa is not None:
            if abs(kappa - 1.0) < abs(best_kappa - 1.0):
                best_kappa = float(kappa)
    if best_kappa is None:
        raise InfeasibleCalibration(
            f"no feasible q-exponent in the grid; skipped {len(skipped)} points"
        )
    if skipped:
        warnings.warn(
            f"skipped {len(skipped)} infeasible q-exponent grid points",
            RuntimeWarning,
            stacklevel=2,
        )
    return best_kappa


# -- normal quantile ---------------------------------------------------------

_ACKLAM_A = (
    -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
    1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00,
)
_ACKLAM_B = (
    -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
    6.680131188771972e01, -1.328068155288572e01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
    -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
    3.754408661907416e00,
)


def norm_quantile(p: float) -> float:
    """Inverse standard normal CDF via a rational approximation plus one
    Halley refinement against erfc; accurate to well below 1e-9."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile argument must be in (0, 1)")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
            ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        )
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    # Halley step on Phi(x) - p = 0
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    dens = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if dens > 0.0:
        u = err / dens
        x -= u / (1.0 + 0.5 * x * u)
    return x
