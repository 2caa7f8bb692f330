import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gecal import BasisSpec, ObservedData, build_basis, fit_logistic


def make_mar_data(seed=0, n_units=200, missing_scale=1.0):
    """Logistic-missingness dataset with a linear outcome, for solver tests."""
    rng = np.random.default_rng(seed)
    x = rng.normal(2.0, 1.0, size=(n_units, 3))
    y = 1.0 + x[:, 0] - x[:, 1] + rng.normal(0.0, 1.0, size=n_units)
    lp = missing_scale * (-0.8 + 0.5 * x[:, 1] - 0.4 * x[:, 2])
    pi = 1.0 / (1.0 + np.exp(-lp))
    responded = rng.random(n_units) < pi
    if responded.sum() < 10 or responded.all():
        raise RuntimeError("pathological draw; change the seed")
    return ObservedData(covariates=x, outcome=y, responded=responded)


@pytest.fixture
def mar_data():
    return make_mar_data(seed=0)


@pytest.fixture
def mar_fit(mar_data):
    return fit_logistic(mar_data, rp_columns=(1, 2))


@pytest.fixture
def mar_basis(mar_data):
    return build_basis(mar_data, BasisSpec.with_raw_columns((0, 1)))
