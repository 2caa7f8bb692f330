import numpy as np
import pytest

from gecal import (
    QWeights,
    build_design,
    fit_gamma_hat,
    fit_gls,
    fit_lasso_weighted,
    fit_q_weighted,
    parse_entropy,
    recover_weights,
    solve_dual,
)
from gecal.regression import _standardize, fit_weighted_ls
from oracles import ista_weighted_lasso


def test_gls_with_unit_variance_is_ols():
    rng = np.random.default_rng(0)
    x = np.column_stack([np.ones(30), rng.normal(size=30)])
    y = 2.0 + 3.0 * x[:, 1] + rng.normal(size=30)
    delta = np.ones(30, dtype=bool)
    gls = fit_gls(x, y, delta, np.ones(30))
    ols, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert np.allclose(gls.coef, ols, rtol=1e-10)


def test_gls_intercept_only_is_weighted_mean():
    rng = np.random.default_rng(1)
    y = rng.normal(size=25)
    v = rng.uniform(0.5, 2.0, size=25)
    delta = rng.random(25) < 0.6
    fit = fit_gls(np.ones((25, 1)), y, delta, v)
    expected = np.sum(y[delta] / v[delta]) / np.sum(1.0 / v[delta])
    assert fit.coef[0] == pytest.approx(expected, rel=1e-12)


def test_gls_matches_hand_elimination_on_six_points():
    x = np.column_stack([np.ones(6), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]])
    y = np.array([1.1, 1.9, 3.2, 3.8, 5.1, 6.2])
    v = np.array([1.0, 2.0, 0.5, 1.0, 2.0, 1.0])
    delta = np.ones(6, dtype=bool)
    # hand-coded 2x2 normal equations by Gaussian elimination
    w = 1.0 / v
    a11, a12 = np.sum(w), np.sum(w * x[:, 1])
    a22 = np.sum(w * x[:, 1] ** 2)
    b1, b2 = np.sum(w * y), np.sum(w * x[:, 1] * y)
    m = a12 / a11
    beta1 = (b2 - m * b1) / (a22 - m * a12)
    beta0 = (b1 - a12 * beta1) / a11
    fit = fit_gls(x, y, delta, v)
    assert np.allclose(fit.coef, [beta0, beta1], rtol=1e-12)


def test_normal_equations_residual():
    rng = np.random.default_rng(5)
    x = np.column_stack([np.ones(60), rng.normal(size=(60, 3))])
    y = rng.normal(size=60)
    delta = rng.random(60) < 0.7
    q = rng.uniform(0.3, 2.0, size=60)
    fit = fit_q_weighted(x, y, delta, q)
    resid_vec = np.zeros(60)
    resid_vec[delta] = fit.residuals
    score = x[delta].T @ (q[delta] * resid_vec[delta])
    assert np.max(np.abs(score)) <= 1e-8


def test_q_identifications():
    rng = np.random.default_rng(6)
    x = np.column_stack([np.ones(40), rng.normal(size=40)])
    y = rng.normal(size=40)
    delta = rng.random(40) < 0.8
    v = rng.uniform(0.5, 1.5, size=40)
    a = fit_gls(x, y, delta, v)
    b = fit_q_weighted(x, y, delta, 1.0 / v)
    assert np.allclose(a.coef, b.coef, rtol=1e-12)
    c = fit_q_weighted(x, y, delta, np.ones(40))
    ols = fit_weighted_ls(x, y, delta, np.ones(40))
    assert np.allclose(c.coef, ols.coef, rtol=1e-14)


def test_rank_deficiency_names_columns():
    x = np.column_stack([np.ones(20), np.arange(20.0), 2.0 * np.arange(20.0)])
    y = np.arange(20.0)
    with pytest.raises(ValueError, match="rank deficient"):
        fit_weighted_ls(x, y, np.ones(20, dtype=bool), np.ones(20))


def test_zero_column_gets_zero_coefficient():
    rng = np.random.default_rng(7)
    x = np.column_stack([np.ones(30), rng.normal(size=30), np.zeros(30)])
    y = 1.0 + 2.0 * x[:, 1] + rng.normal(size=30)
    fit = fit_weighted_ls(x, y, np.ones(30, dtype=bool), np.ones(30))
    assert fit.coef[2] == 0.0
    ref = fit_weighted_ls(x[:, :2], y, np.ones(30, dtype=bool), np.ones(30))
    assert np.allclose(fit.coef[:2], ref.coef, rtol=1e-14)


def test_gamma_hat_orthogonality_residual(mar_data, mar_fit, mar_basis):
    ent = parse_entropy("el")
    q = QWeights.unit(mar_data.n_units)
    design = build_design(mar_data, mar_basis, mar_fit, ent, q, ("balance", "debias"))
    dual = solve_dual(design, ent)
    weights = recover_weights(design, ent, dual)
    fit = fit_gamma_hat(design.z, mar_data.outcome, mar_data.responded, ent, weights, q)
    w_reg = q.values[mar_data.responded] / ent.g_second(weights.omega)
    score = design.z[mar_data.responded].T @ (w_reg * fit.residuals)
    assert np.max(np.abs(score)) <= 1e-8


def test_gamma_hat_constant_curvature_equals_weighted_ls(mar_data, mar_fit, mar_basis):
    # quadratic generator has constant g'', so gamma reduces to q-weighted LS
    ent = parse_entropy("renyi:1")
    q = QWeights.unit(mar_data.n_units)
    design = build_design(mar_data, mar_basis, mar_fit, ent, q, ("balance", "debias"))

    class FakeWeights:
        omega = np.full(mar_data.n_responded, 2.0)

    fit = fit_gamma_hat(design.z, mar_data.outcome, mar_data.responded, ent, FakeWeights(), q)
    ref = fit_q_weighted(design.z, mar_data.outcome, mar_data.responded, q.values)
    assert np.allclose(fit.coef, ref.coef, rtol=1e-10)


def test_gamma_hat_permutation_invariance(mar_data, mar_fit, mar_basis):
    from gecal import ObservedData

    ent = parse_entropy("et")
    q = QWeights.unit(mar_data.n_units)
    design = build_design(mar_data, mar_basis, mar_fit, ent, q, ("balance", "debias"))
    dual = solve_dual(design, ent)
    weights = recover_weights(design, ent, dual)
    fit = fit_gamma_hat(design.z, mar_data.outcome, mar_data.responded, ent, weights, q)

    rng = np.random.default_rng(33)
    perm = rng.permutation(mar_data.n_units)
    data_p = ObservedData(mar_data.covariates[perm], mar_data.outcome[perm], mar_data.responded[perm])
    z_p = design.z[perm]
    resp_perm_order = np.flatnonzero(mar_data.responded)
    rank_of = {unit: k for k, unit in enumerate(resp_perm_order)}
    omega_p = weights.omega[[rank_of[u] for u in perm[data_p.responded]]]

    class P:
        omega = omega_p

    fit_p = fit_gamma_hat(z_p, data_p.outcome, data_p.responded, ent, P(), QWeights.unit(mar_data.n_units))
    assert np.max(np.abs(fit.coef - fit_p.coef)) < 1e-12


# -- weighted lasso ----------------------------------------------------------


def _lasso_problem(seed=10, n=40, p=15):
    rng = np.random.default_rng(seed)
    z = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    gamma = np.zeros(p)
    gamma[[0, 2, 5]] = [1.0, 2.0, -1.5]
    y = z @ gamma + rng.normal(0, 0.4, size=n)
    delta = rng.random(n) < 0.85
    w = rng.uniform(0.5, 2.0, size=n)
    return z, y, delta, w


def test_lasso_zero_penalty_is_weighted_ls():
    z, y, delta, w = _lasso_problem()
    fit = fit_lasso_weighted(z, y, delta, w, 0.0)
    ref = fit_weighted_ls(z, y, delta, w)
    assert np.max(np.abs(fit.coef - ref.coef)) < 1e-6


def test_lasso_saturation_keeps_only_intercept():
    z, y, delta, w = _lasso_problem()
    fit = fit_lasso_weighted(z, y, delta, w, 1e3)
    assert np.all(fit.coef[1:] == 0.0)
    wr = w[delta]
    assert fit.coef[0] == pytest.approx(np.dot(wr, y[delta]) / wr.sum(), rel=1e-10)


def test_lasso_matches_proximal_gradient_oracle():
    z, y, delta, w = _lasso_problem(seed=11)
    tau = 0.05
    fit = fit_lasso_weighted(z, y, delta, w, tau)
    xs, mean, scale = _standardize(z[delta], w[delta])
    ref_std = ista_weighted_lasso(xs, y[delta], w[delta], tau, len(delta))
    ref = ref_std / scale
    ref[0] = ref_std[0] - np.dot(mean / scale, ref_std)
    n_units = len(delta)

    def objective(coef):
        r = y[delta] - z[delta] @ coef
        std_coef = coef * scale
        std_coef[0] = coef[0] + np.dot(mean, coef)
        return 0.5 * np.sum(w[delta] * r**2) / n_units + tau * np.sum(np.abs(std_coef[1:]))

    assert objective(fit.coef) <= objective(ref) + 1e-8


def test_lasso_kkt_on_standardized_columns():
    z, y, delta, w = _lasso_problem(seed=12)
    tau = 0.08
    fit = fit_lasso_weighted(z, y, delta, w, tau)
    xs, mean, scale = _standardize(z[delta], w[delta])
    coef_std = fit.coef * scale
    coef_std[0] = fit.coef[0] + np.dot(mean, fit.coef)
    resid = y[delta] - xs @ coef_std
    grad = (w[delta] * resid) @ xs / len(delta)
    assert abs(grad[0]) <= 1e-6
    for j in range(1, z.shape[1]):
        if coef_std[j] == 0.0:
            assert abs(grad[j]) <= tau + 1e-6
        else:
            assert abs(grad[j] - tau * np.sign(coef_std[j])) <= 1e-6
