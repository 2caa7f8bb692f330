import numpy as np
import pytest

from gecal import (
    ObservedData,
    QWeights,
    aipw_estimate,
    empirical_loss,
    fit_logistic,
    fit_q_weighted,
    ipw_estimate,
    select_kappa,
)
from conftest import make_mar_data


class ConstantFit:
    """Hand-built propensity container for closed-form checks."""

    def __init__(self, pi):
        self.pi_hat = np.asarray(pi, dtype=float)
        self.rp_columns = ()


def test_ipw_full_response_unit_pi_is_sample_mean():
    y = np.array([2.0, 4.0, 9.0])
    data = ObservedData(np.zeros((3, 1)), y, np.ones(3, dtype=bool))
    est = ipw_estimate(data, ConstantFit(np.ones(3)))
    assert est.theta_hat == pytest.approx(y.mean(), rel=1e-15)


def test_ipw_two_unit_hand_value():
    data = ObservedData(np.zeros((2, 1)), np.array([3.0, np.nan]), np.array([True, False]))
    est = ipw_estimate(data, ConstantFit([0.5, 0.5]))
    assert est.theta_hat == pytest.approx(3.0, rel=1e-15)


def test_ipw_rejects_vanishing_propensity():
    data = ObservedData(np.zeros((2, 1)), np.array([3.0, np.nan]), np.array([True, False]))
    with pytest.raises(ValueError):
        ipw_estimate(data, ConstantFit([1e-14, 0.5]))


def test_delta_b_recomputable(mar_data, mar_fit, mar_basis):
    est = aipw_estimate(mar_data, mar_fit, mar_basis, QWeights.unit(mar_data.n_units))
    resp = mar_data.responded
    expected = (
        mar_basis[resp].T @ (1.0 / mar_fit.pi_hat[resp]) / mar_data.n_units
        - mar_basis.mean(axis=0)
    )
    assert np.max(np.abs(est.delta_b - expected)) < 1e-12


def test_aipw_full_response_is_sample_mean():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 2))
    y = rng.normal(size=50)
    data = ObservedData(x, y, np.ones(50, dtype=bool))
    basis = np.column_stack([np.ones(50), x])
    for kappa in (1.0, 0.3, 2.0):
        q = QWeights.propensity_power(np.full(50, 0.7), kappa)
        est = aipw_estimate(data, ConstantFit(np.full(50, 0.7)), basis, q)
        assert est.theta_hat == pytest.approx(y.mean(), rel=1e-12)


def test_prediction_plus_rectifier_identity(mar_data, mar_fit, mar_basis):
    # the inverse-weighted form equals prediction plus inverse-weighted residual
    q = QWeights.unit(mar_data.n_units)
    est = aipw_estimate(mar_data, mar_fit, mar_basis, q)
    beta = fit_q_weighted(mar_basis, mar_data.outcome, mar_data.responded, q.values).coef
    resp = mar_data.responded
    pred = mar_basis @ beta
    rect = np.sum((mar_data.observed_outcome - pred[resp]) / mar_fit.pi_hat[resp])
    alt = pred.mean() + rect / mar_data.n_units
    assert est.theta_hat == pytest.approx(alt, abs=1e-10)


def test_aipw_invariant_to_zero_basis_column(mar_data, mar_fit, mar_basis):
    q = QWeights.unit(mar_data.n_units)
    base = aipw_estimate(mar_data, mar_fit, mar_basis, q)
    padded = np.column_stack([mar_basis, np.zeros(mar_data.n_units)])
    alt = aipw_estimate(mar_data, mar_fit, padded, q)
    assert alt.theta_hat == base.theta_hat


def test_empirical_loss_constant_under_full_response():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 1.0, size=(40, 2))
    y = rng.normal(size=40)
    data = ObservedData(x, y, np.ones(40, dtype=bool))
    fit = ConstantFit(np.ones(40))
    basis = np.column_stack([np.ones(40), x])
    v = np.ones(40)
    losses = [empirical_loss(data, fit, basis, kappa, v) for kappa in (-0.5, 0.0, 1.0, 2.0)]
    assert np.allclose(losses, 1.0, atol=1e-10)


def test_loss_finite_on_grid(mar_data, mar_fit, mar_basis):
    grid = np.round(np.arange(-1.0, 3.0 + 1e-9, 0.1), 10)
    vals = [
        empirical_loss(mar_data, mar_fit, mar_basis, k, np.ones(mar_data.n_responded))
        for k in grid
    ]
    assert np.all(np.isfinite(vals))
    assert np.all(np.asarray(vals) >= 0.0)


def test_select_kappa_beats_unit_weights(mar_data, mar_fit, mar_basis):
    kappa = select_kappa(mar_data, mar_fit, mar_basis, v_mode="unit")
    v = np.ones(mar_data.n_responded)
    loss_sel = empirical_loss(mar_data, mar_fit, mar_basis, kappa, v)
    loss_one = empirical_loss(mar_data, mar_fit, mar_basis, 1.0, v)
    assert loss_sel <= loss_one + 1e-12


def test_select_kappa_matches_fine_grid_oracle(mar_data, mar_fit, mar_basis):
    kappa = select_kappa(mar_data, mar_fit, mar_basis, v_mode="unit")
    fine = np.linspace(-1.0, 3.0, 8001)
    v = np.ones(mar_data.n_responded)
    vals = [empirical_loss(mar_data, mar_fit, mar_basis, k, v) for k in fine]
    best = fine[int(np.argmin(vals))]
    assert abs(kappa - best) <= 0.1  # the coarse grid step bounds the gap


def test_select_kappa_deterministic(mar_data, mar_fit, mar_basis):
    a = select_kappa(mar_data, mar_fit, mar_basis, v_mode="residual")
    b = select_kappa(mar_data, mar_fit, mar_basis, v_mode="residual")
    assert a == b
