import numpy as np
import pytest

from gecal import BasisSpec, ObservedData, QWeights, build_basis, load_csv
from gecal.data_model import write_csv


def small_data():
    x = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [0.5, -1.0, 2.5]])
    y = np.array([1.0, np.nan, 3.0])
    responded = np.array([True, False, True])
    return ObservedData(covariates=x, outcome=y, responded=responded)


def test_observed_data_counts_and_masking():
    data = small_data()
    assert data.n_units == 3
    assert data.n_responded == 2
    assert np.isnan(data.outcome[1])
    assert np.array_equal(data.observed_outcome, [1.0, 3.0])


def test_outcome_poisoned_even_when_value_supplied():
    x = np.ones((2, 1))
    data = ObservedData(covariates=x, outcome=np.array([5.0, 99.0]),
                        responded=np.array([True, False]))
    assert np.isnan(data.outcome[1])


def test_inputs_not_mutated_and_frozen():
    x = np.ones((2, 2))
    y = np.array([1.0, 2.0])
    d = np.array([True, True])
    data = ObservedData(x, y, d)
    x[0, 0] = 7.0  # caller's array stays writable
    with pytest.raises(ValueError):
        data.covariates[0, 0] = 5.0


def test_missing_outcome_on_responded_unit_rejected():
    with pytest.raises(ValueError):
        ObservedData(np.ones((2, 1)), np.array([np.nan, 1.0]), np.array([True, True]))


def test_basis_intercept_only():
    data = small_data()
    out = build_basis(data, BasisSpec.intercept_only())
    assert out.shape == (3, 1)
    assert np.all(out == 1.0)


def test_basis_raw_columns_rows_match():
    data = small_data()
    out = build_basis(data, BasisSpec.with_raw_columns((0, 1)))
    assert np.array_equal(out[0], [1.0, 1.0, 2.0])
    assert np.array_equal(out[1], [1.0, 4.0, 5.0])


def test_basis_interaction_and_centered_square():
    rng = np.random.default_rng(4)
    x = rng.normal(2.0, 1.0, size=(5, 3))
    data = ObservedData(x, rng.normal(size=5), np.ones(5, dtype=bool))
    spec = BasisSpec((
        ("intercept",), ("raw", 0), ("raw", 1),
        ("interaction", 0, 1), ("square_centered", 1),
    ))
    out = build_basis(data, spec)
    for i in range(5):
        expected = [1.0, x[i, 0], x[i, 1], x[i, 0] * x[i, 1], x[i, 1] ** 2 - 1.0]
        assert np.allclose(out[i], expected, rtol=0, atol=0)


def test_basis_column_order_follows_spec():
    data = small_data()
    spec = BasisSpec((("intercept",), ("raw", 2), ("raw", 0)))
    out = build_basis(data, spec)
    assert np.array_equal(out[:, 1], data.covariates[:, 2])
    assert np.array_equal(out[:, 2], data.covariates[:, 0])


def test_basis_requires_leading_intercept_and_valid_columns():
    data = small_data()
    with pytest.raises(ValueError):
        BasisSpec((("raw", 0),))
    with pytest.raises(IndexError):
        build_basis(data, BasisSpec((("intercept",), ("raw", 9))))


def test_qweights_unit_and_power():
    q = QWeights.unit(4)
    assert np.all(q.values == 1.0)
    pi = np.array([0.2, 0.5, 0.8])
    q2 = QWeights.propensity_power(pi, 2.0)
    assert np.allclose(q2.values, pi)
    q3 = QWeights.propensity_power(pi, 1.0)
    assert q3.family == "unit"
    assert np.all(q3.values == 1.0)
    with pytest.raises(ValueError):
        QWeights("unit", np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        QWeights("power", np.array([1.0, -0.5]))


def test_load_csv_blank_convention(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,x2,y\n1.0,2.0,3.5\n4.0,5.0,\n7.0,8.0,9.5\n")
    data = load_csv(path, "y")
    assert data.n_responded == 2
    assert data.covariates.shape == (3, 2)
    assert np.isnan(data.outcome[1])


def test_load_csv_indicator_column(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,y,r\n1.0,3.5,1\n4.0,0.0,0\n7.0,9.5,1\n")
    data = load_csv(path, "y", indicator_col="r")
    assert data.n_responded == 2
    assert data.covariates.shape == (3, 1)
    assert np.isnan(data.outcome[1])


def test_load_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("x1,y\nfoo,1.0\n")
    with pytest.raises(ValueError):
        load_csv(path, "y")
    path.write_text("x1,y\n1.0,\n2.0,\n")
    with pytest.raises(ValueError):
        load_csv(path, "y")
    path.write_text("x1,y\n1.0,2.0\n")
    with pytest.raises(ValueError):
        load_csv(path, "missing_col")


def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    responded = rng.random(20) < 0.7
    data = ObservedData(x, y, responded)
    path = tmp_path / "round.csv"
    write_csv(data, path)
    back = load_csv(path, "y")
    assert np.array_equal(back.responded, data.responded)
    assert np.array_equal(back.covariates, data.covariates)
    assert np.array_equal(back.outcome[back.responded], data.outcome[data.responded])
