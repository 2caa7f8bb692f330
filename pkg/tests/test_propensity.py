import numpy as np
import pytest

from gecal import ObservedData, fit_logistic, fit_logistic_l1, pi_gradient
from gecal.propensity import SeparationWarning, cross_validate_penalty
from oracles import central_diff, ista_logistic_l1, logistic_grid_mle
from conftest import make_mar_data


def test_intercept_only_closed_form():
    rng = np.random.default_rng(1)
    responded = rng.random(400) < 0.35
    data = ObservedData(np.zeros((400, 1)), np.where(responded, 1.0, np.nan), responded)
    fit = fit_logistic(data, rp_columns=())
    rate = responded.mean()
    assert fit.phi_hat[0] == pytest.approx(np.log(rate / (1 - rate)), abs=1e-9)
    assert np.allclose(fit.pi_hat, rate, atol=1e-9)


def test_score_equation_residual():
    data = make_mar_data(seed=3, n_units=500)
    fit = fit_logistic(data, rp_columns=(1, 2))
    x = fit.design(data)
    score = x.T @ (data.responded - fit.pi_hat) / data.n_units
    assert np.max(np.abs(score)) <= 1e-8


def test_matches_grid_search_oracle():
    rng = np.random.default_rng(9)
    x1 = rng.normal(0.0, 1.0, size=20)
    lp = 0.4 + 0.9 * x1
    responded = rng.random(20) < 1 / (1 + np.exp(-lp))
    data = ObservedData(x1[:, None], np.where(responded, 1.0, np.nan), responded)
    fit = fit_logistic(data, rp_columns=(0,))
    ref = logistic_grid_mle(x1, responded.astype(float))
    assert np.max(np.abs(fit.phi_hat - ref)) < 1e-3


def test_all_responded_warns_separation():
    data = ObservedData(np.linspace(-1, 1, 30)[:, None], np.ones(30), np.ones(30, dtype=bool))
    with pytest.warns(SeparationWarning):
        fit = fit_logistic(data, rp_columns=(0,))
    assert np.all(fit.pi_hat > 0.0) and np.all(fit.pi_hat < 1.0)


def test_rank_deficient_design_raises():
    x = np.column_stack([np.ones(40), np.ones(40)])
    responded = np.arange(40) % 2 == 0
    data = ObservedData(x, np.where(responded, 1.0, np.nan), responded)
    with pytest.raises(ValueError):
        fit_logistic(data, rp_columns=(0, 1))


def test_pi_gradient_hand_value():
    data = make_mar_data(seed=0)
    fit = fit_logistic(data, rp_columns=(1, 2))
    i = int(np.argmin(np.abs(fit.pi_hat - 0.5)))
    grad = pi_gradient(fit, data, i)
    x_i = fit.design(data)[i]
    expected = fit.pi_hat[i] * (1 - fit.pi_hat[i]) * x_i
    assert np.allclose(grad, expected, rtol=1e-12)


def test_pi_gradient_matches_finite_difference():
    from scipy.special import expit

    data = make_mar_data(seed=5)
    fit = fit_logistic(data, rp_columns=(1, 2))
    x = fit.design(data)
    rng = np.random.default_rng(2)
    for i in rng.choice(data.n_units, size=10, replace=False):
        for j in range(len(fit.phi_hat)):
            def pi_of_phi_j(v, i=i, j=j):
                phi = fit.phi_hat.copy()
                phi[j] = v
                return expit(x[i] @ phi)

            fd = central_diff(pi_of_phi_j, fit.phi_hat[j], 1e-5)
            assert pi_gradient(fit, data, i)[j] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_gradient_full_matrix_shape():
    data = make_mar_data(seed=0)
    fit = fit_logistic(data, rp_columns=(1, 2))
    grad = pi_gradient(fit, data)
    assert grad.shape == (data.n_units, 3)
    assert np.all(np.linalg.norm(grad, axis=1) > 0.0)


# -- L1 variant --------------------------------------------------------------


def test_l1_zero_penalty_matches_mle():
    data = make_mar_data(seed=12, n_units=300)
    plain = fit_logistic(data, rp_columns=(0, 1, 2))
    l1 = fit_logistic_l1(data, 0.0, rp_columns=(0, 1, 2))
    assert np.max(np.abs(plain.phi_hat - l1.phi_hat)) < 1e-4


def test_l1_large_penalty_zeroes_slopes():
    data = make_mar_data(seed=12, n_units=300)
    fit = fit_logistic_l1(data, 5.0, rp_columns=(0, 1, 2))
    assert np.all(fit.phi_hat[1:] == 0.0)
    rate = data.responded.mean()
    assert fit.phi_hat[0] == pytest.approx(np.log(rate / (1 - rate)), abs=1e-6)


def test_l1_kkt_certificate():
    data = make_mar_data(seed=21, n_units=250)
    penalty = 0.03
    fit = fit_logistic_l1(data, penalty, rp_columns=(0, 1, 2))
    from scipy.special import expit

    x = fit.design(data)
    grad = x.T @ (expit(x @ fit.phi_hat) - data.responded) / data.n_units
    assert abs(grad[0]) <= 1e-6
    for j in range(1, 4):
        if fit.phi_hat[j] != 0.0:
            assert abs(grad[j] + penalty * np.sign(fit.phi_hat[j])) <= 1e-6
        else:
            assert abs(grad[j]) <= penalty + 1e-6


def test_l1_support_matches_proximal_gradient_oracle():
    rng = np.random.default_rng(31)
    n, p = 50, 20
    x = rng.normal(size=(n, p))
    phi_true = np.zeros(p)
    phi_true[[0, 3, 7]] = [1.4, -1.2, 1.0]
    lp = 0.3 + x @ phi_true
    responded = rng.random(n) < 1 / (1 + np.exp(-lp))
    data = ObservedData(x, np.where(responded, 1.0, np.nan), responded)
    penalty = 0.08
    fit = fit_logistic_l1(data, penalty)
    design = fit.design(data)
    ref = ista_logistic_l1(design, data.responded.astype(float), penalty)
    assert np.array_equal(fit.phi_hat != 0.0, ref != 0.0)
    assert np.max(np.abs(fit.phi_hat - ref)) < 1e-5


def test_l1_path_monotone_support():
    data = make_mar_data(seed=2, n_units=300)
    sizes = []
    for pen in np.geomspace(1e-4, 1.0, 10):
        fit = fit_logistic_l1(data, pen, rp_columns=(0, 1, 2))
        sizes.append(int(np.sum(fit.phi_hat[1:] != 0.0)))
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_cross_validated_penalty_in_grid_range():
    data = make_mar_data(seed=44, n_units=200)
    pen = cross_validate_penalty(data, rp_columns=(0, 1, 2), n_grid=8)
    assert pen > 0.0
    fit = fit_logistic_l1(data, pen, rp_columns=(0, 1, 2))
    assert np.all(np.isfinite(fit.phi_hat))
