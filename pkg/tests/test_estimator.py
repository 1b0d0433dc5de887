import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from helpers import sine_eigen, sine_poisson
from tnnpde.estimator import TNNSolver
from tnnpde.problems import ValidationError
from tnnpde.solver import Discretization
from tnnpde.tnn import value_at


def test_params_and_clone():
    est = TNNSolver("neumann-d2", p=3, hidden=(4,), adam_epochs=2, lbfgs_epochs=0)
    params = est.get_params()
    assert params["problem"] == "neumann-d2" and params["p"] == 3
    assert clone(est).get_params() == params


def test_fit_predict_score():
    pb = sine_poisson(modes=(1, 2))
    est = TNNSolver(pb, p=4, hidden=(8,), adam_epochs=60, lbfgs_epochs=20, seed=0).fit()
    X = np.random.default_rng(0).uniform(size=(30, 2))
    pred = est.predict(X)
    exact = pb.exact_u(X)
    assert pred.shape == (30,)
    assert np.sqrt(np.mean((pred - exact) ** 2)) < 0.1
    assert est.score() == pytest.approx(-est.report_.final["e_l2"], rel=1e-12)
    with pytest.raises(ValidationError):
        est.predict(np.zeros((2, 3)))


def test_eigenvalue_attribute():
    est = TNNSolver(sine_eigen(), p=3, hidden=(6,), pretrain_epochs=20, adam_epochs=5,
                    lbfgs_epochs=5).fit()
    assert est.eigenvalue_ == pytest.approx(2 * np.pi ** 2, rel=1e-2)


def test_nonhomogeneous_prediction_includes_lift():
    est = TNNSolver("poisson-nonhomo-d2", p=3, hidden=(6,), adam_epochs=3, lbfgs_epochs=0,
                    boundary_adam_epochs=150, boundary_lbfgs_epochs=30)
    est.fit()
    assert set(est.states_) == {"lift", "u"}
    layout = Discretization(est.spec_).layout
    edge = np.array([[0.0, 0.5], [1.0, 0.25]])
    # the masked network vanishes on the boundary, leaving only the lift there
    assert np.allclose(est.predict(edge), value_at(est.states_["lift"], edge, layout), atol=1e-14)
    inner = np.array([[0.4, 0.6]])
    both = value_at(est.states_["lift"], inner, layout) + value_at(est.states_["u"], inner, layout)
    assert np.allclose(est.predict(inner), both, atol=1e-14)
    assert np.allclose(est.predict(edge), est.spec_.exact_u(edge), atol=0.1)


def test_unfitted():
    with pytest.raises(NotFittedError):
        TNNSolver().predict(np.zeros((1, 2)))
