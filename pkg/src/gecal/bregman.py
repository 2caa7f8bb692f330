"""Bregman-projection diagnostics for calibrated weights.

The calibrated weights are the Bregman projection of the starting weights
onto the constraint set, which gives an exact Pythagorean identity and an
additive decomposition of the divergence "paid" for nested constraint sets.
The per-unit divergence contributions expose units where constraints strain
against limited overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .entropy import EntropySpec
from .gec_core import AugmentedDesign, constraint_residuals, recover_weights, solve_dual, CalibrationWeights

__all__ = [
    "BregmanReport",
    "weighted_divergence",
    "pythagorean_check",
    "nested_decomposition",
    "project_weights",
]


@dataclass(frozen=True)
class BregmanReport:
    total: float        # divergence of the full-constraint projection from w0
    baseline: float     # divergence of the reduced-constraint projection from w0
    extras: float       # extra divergence paid for the additional constraints
    per_unit: np.ndarray  # q_i^-1 D(w_hat_i || w0_i) over responded units

    @property
    def ratio(self) -> float:
        """baseline / total; the share of divergence explained by the
        reduced constraint set."""
        return self.baseline / self.total if self.total > 0 else float("nan")


def weighted_divergence(entropy, q, delta, omega_a, omega_b) -> float:
    """sum over responded units of D_G(omega_a || omega_b) / q, nonnegative."""
    delta = np.asarray(delta, dtype=bool)
    qv = q.values if hasattr(q, "values") else np.asarray(q, dtype=float)
    qr = qv[delta] if qv.shape[0] == delta.shape[0] else qv
    a = np.asarray(omega_a, dtype=float)
    b = np.asarray(omega_b, dtype=float)
    if a.shape[0] == delta.shape[0]:
        a = a[delta]
    if b.shape[0] == delta.shape[0]:
        b = b[delta]
    return float(np.sum(entropy.bregman(a, b) / qr))


def per_unit_divergence(entropy, q, delta, omega_a, omega_b) -> np.ndarray:
    delta = np.asarray(delta, dtype=bool)
    qv = q.values if hasattr(q, "values") else np.asarray(q, dtype=float)
    qr = qv[delta] if qv.shape[0] == delta.shape[0] else qv
    return entropy.bregman(np.asarray(omega_a), np.asarray(omega_b)) / qr


def project_weights(
    design: AugmentedDesign,
    entropy: EntropySpec,
    omega0: np.ndarray,
) -> CalibrationWeights:
    """Bregman projection of the starting weights onto the constraint set.

    Solves the shifted dual so the projected weights take the form
    g^{-1}(g(w0_i) + lam'z_i q_i) over the responded units.
    """
    omega0 = np.asarray(omega0, dtype=float)
    resp = design.responded
    w0 = omega0[resp] if omega0.shape[0] == resp.shape[0] else omega0
    offset = entropy.g_deriv(w0)
    dual = solve_dual(design, entropy, offset=offset)
    weights = recover_weights(design, entropy, dual, offset=offset)
    return CalibrationWeights(omega=weights.omega, initial=w0)


def pythagorean_check(
    entropy,
    q,
    delta,
    omega_feasible,
    omega_hat,
    omega0,
    feasibility=None,
    require_feasible: bool = True,
) -> float:
    """|D(w||w0) - D(w||w_hat) - D(w_hat||w0)| for a feasible comparison w.

    ``feasibility`` is the caller-computed max constraint residual of
    ``omega_feasible``; when ``require_feasible`` the identity is only
    meaningful for residuals below 1e-6 and larger values are rejected.
    Passing ``require_feasible=False`` lets negative controls measure how the
    identity degrades for infeasible weights.
    """
    if require_feasible:
        if feasibility is None:
            raise ValueError("pass the constraint residual of omega_feasible via 'feasibility'")
        if feasibility > 1e-6:
            raise ValueError(
                f"omega_feasible violates the constraints (residual {feasibility:.3e})"
            )
    lhs = weighted_divergence(entropy, q, delta, omega_feasible, omega0)
    rhs = (
        weighted_divergence(entropy, q, delta, omega_feasible, omega_hat)
        + weighted_divergence(entropy, q, delta, omega_hat, omega0)
    )
    return float(abs(lhs - rhs))


def _column_subset(sub: AugmentedDesign, full: AugmentedDesign) -> bool:
    """Structural check: every column of sub.z appears verbatim in full.z."""
    for j in range(sub.z.shape[1]):
        col = sub.z[:, j]
        if not any(np.array_equal(col, full.z[:, k]) for k in range(full.z.shape[1])):
            return False
    return True


def nested_decomposition(
    entropy: EntropySpec,
    q,
    delta,
    design_full: AugmentedDesign,
    design_sub: AugmentedDesign,
    omega0: np.ndarray,
) -> BregmanReport:
    """Two projections from the same start decompose the divergence additively.

    ``design_sub`` must impose a subset of the columns of ``design_full``
    (checked structurally, column by column).  The report carries the total
    divergence, the part attributable to the reduced constraints, the price
    of the extras, and per-unit contributions of the full projection.
    """
    if not _column_subset(design_sub, design_full):
        raise ValueError("design_sub's constraint columns are not a subset of design_full's")
    w_full = project_weights(design_full, entropy, omega0)
    w_sub = project_weights(design_sub, entropy, omega0)
    total = weighted_divergence(entropy, q, delta, w_full.omega, w_full.initial)
    baseline = weighted_divergence(entropy, q, delta, w_sub.omega, w_sub.initial)
    extras = weighted_divergence(entropy, q, delta, w_full.omega, w_sub.omega)
    return BregmanReport(
        total=total,
        baseline=baseline,
        extras=extras,
        per_unit=per_unit_divergence(entropy, q, delta, w_full.omega, w_full.initial),
    )
