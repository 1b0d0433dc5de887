"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .problems import ProblemSpec, ValidationError, get_problem
from .solver import Discretization, TrainingError, compute_metrics, train
from .tnn import value_at


class TNNSolver(BaseEstimator):
    """Fit a tensor neural network to a registry or custom problem.

    ``fit`` takes no training data: the problem (operator, source, boundary
    data) plays that role.  Schedule fields left as ``None`` keep the
    problem's own values.  After fitting, ``predict`` evaluates u_p pointwise.
    """

    def __init__(self, problem: Union[str, ProblemSpec] = "poisson-homo-d2", desk: bool = True,
                 seed: int = 0, p: Optional[int] = None, hidden: Optional[Sequence[int]] = None,
                 adam_epochs: Optional[int] = None, lbfgs_epochs: Optional[int] = None,
                 pretrain_epochs: Optional[int] = None, boundary_adam_epochs: Optional[int] = None,
                 boundary_lbfgs_epochs: Optional[int] = None, coef_grad: str = "implicit"):
        self.problem = problem
        self.desk = desk
        self.seed = seed
        self.p = p
        self.hidden = hidden
        self.adam_epochs = adam_epochs
        self.lbfgs_epochs = lbfgs_epochs
        self.pretrain_epochs = pretrain_epochs
        self.boundary_adam_epochs = boundary_adam_epochs
        self.boundary_lbfgs_epochs = boundary_lbfgs_epochs
        self.coef_grad = coef_grad

    def _spec(self, problem=None) -> ProblemSpec:
        problem = self.problem if problem is None else problem
        spec = get_problem(problem, desk=self.desk) if isinstance(problem, str) else problem
        keys = ("p", "adam_epochs", "lbfgs_epochs", "pretrain_epochs", "boundary_adam_epochs",
                "boundary_lbfgs_epochs")
        over = {k: getattr(self, k) for k in keys if getattr(self, k) is not None}
        if self.hidden is not None:
            over["hidden"] = tuple(int(h) for h in self.hidden)
        if over:
            spec = dataclasses.replace(spec, schedule=dataclasses.replace(spec.schedule, **over))
        return spec.validate()

    def fit(self, X=None, y=None, problem=None):
        """Train; ``X`` and ``y`` are ignored and exist for API compatibility."""
        spec = self._spec(problem)
        report = train(spec, seed=self.seed, coef_grad=self.coef_grad)
        if report.status != "ok":
            raise TrainingError(report.error, report)
        self.spec_ = spec
        self.report_ = report
        self.states_ = report.states
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "states_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.spec_.d:
            raise ValidationError(f"expected {self.spec_.d} columns, got {X.shape[1]}")
        layout = Discretization(self.spec_).layout
        out = value_at(self.states_["u"], X, layout)
        if "lift" in self.states_:
            out = out + value_at(self.states_["lift"], X, layout)
        return out

    @property
    def eigenvalue_(self) -> Optional[float]:
        check_is_fitted(self, "states_")
        return self.report_.final.get("lambda")

    def score(self, X=None, y=None) -> float:
        """Negative relative L2 error against the exact solution (higher is better)."""
        check_is_fitted(self, "states_")
        m = compute_metrics(self.states_, self.spec_)
        if "e_l2" not in m:
            raise ValidationError("score needs a problem with a known exact solution")
        return -m["e_l2"]
