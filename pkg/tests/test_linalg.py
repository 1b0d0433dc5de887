import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tnnpde.autodiff import NumericalError
from tnnpde.linalg import (AdamState, LbfgsState, SingularSystemError, adam_step, cholesky_solve,
                           jittered_cholesky, lbfgs_step, smallest_generalized_eigpair)


def spd(n, seed, shift=1.0):
    G = np.random.default_rng(seed).normal(size=(n, n))
    return G.T @ G + shift * np.eye(n)


def test_solve_examples():
    b = np.array([0.3, -2.0, 5.0])
    assert np.array_equal(cholesky_solve(np.eye(3), b), b)
    assert np.allclose(cholesky_solve(np.diag([2.0, 4.0]), [2.0, 8.0]), [1.0, 2.0], atol=1e-15)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_solve_residual(seed):
    A = spd(50, seed)
    B = np.random.default_rng(seed + 1).normal(size=50)
    c = cholesky_solve(A, B)
    assert np.linalg.norm(A @ c - B) <= 1e-10 * np.linalg.norm(B)


def test_jitter_rescues_semidefinite():
    v = np.array([1.0, 2.0, -1.0])
    A = np.outer(v, v) + np.outer([0, 1.0, 1.0], [0, 1.0, 1.0])  # rank 2
    A[0, 0] -= 1e-15
    L, tau = jittered_cholesky(A)
    assert tau > 0
    with pytest.raises(SingularSystemError):
        cholesky_solve(-np.eye(2), [1.0, 1.0])
    with pytest.raises(SingularSystemError):
        cholesky_solve(np.array([[np.nan, 0], [0, 1.0]]), [1.0, 1.0])


def test_eig_examples():
    lam, c = smallest_generalized_eigpair(np.diag([1.0, 2.0]), np.eye(2))
    assert lam == pytest.approx(1.0) and np.allclose(c, [1.0, 0.0])
    M = spd(6, 3)
    lam, c = smallest_generalized_eigpair(2 * M, M)
    assert lam == pytest.approx(2.0, rel=1e-12)
    assert np.linalg.norm(2 * M @ c - lam * M @ c) <= 1e-9 * np.abs(2 * M).max()
    assert c @ M @ c == pytest.approx(1.0, abs=1e-12)


def _bisection_smallest(A, M, lo, hi, tol=1e-13):
    """Smallest pencil eigenvalue: A - t M is positive definite exactly for t < lambda_min."""
    def definite(t):
        try:
            np.linalg.cholesky(A - t * M)
            return True
        except np.linalg.LinAlgError:
            return False
    assert definite(lo) and not definite(hi)
    while hi - lo > tol * max(1.0, abs(hi)):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if definite(mid) else (lo, mid)
    return 0.5 * (lo + hi)


@pytest.mark.parametrize("seed", range(4))
def test_eig_against_bisection_oracle(seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(30, 30))
    A = 0.5 * (G + G.T)
    M = spd(30, seed + 100)
    lam, c = smallest_generalized_eigpair(A, M)
    bound = np.abs(A).sum() * 10
    ref = _bisection_smallest(A, M, -bound, bound)
    assert abs(lam - ref) <= 1e-9 * abs(ref)
    assert np.linalg.norm(A @ c - lam * M @ c) <= 1e-9 * np.abs(A).max()
    assert c[np.flatnonzero(c)[0]] > 0
    X = rng.normal(size=(100, 30))
    rq = np.einsum("ki,ij,kj->k", X, A, X) / np.einsum("ki,ij,kj->k", X, M, X)
    assert rq.min() >= lam - 1e-9


def test_adam_examples():
    x = np.array([1.0, -2.0])
    assert np.array_equal(adam_step(AdamState.zeros(2), x, np.zeros(2), 0.1), x)
    assert np.array_equal(adam_step(AdamState.zeros(2), x, np.array([3.0, -1.0]), 0.0), x)
    out = adam_step(AdamState.zeros(2), x, np.array([3.0, -1e-3]), 0.01)
    g = np.array([3.0, -1e-3])
    assert np.allclose(out, x - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
    assert np.allclose(out - x, [-0.01, 0.01], atol=1e-7)
    with pytest.raises(NumericalError):
        adam_step(AdamState.zeros(2), x, np.array([np.inf, 0.0]), 0.1)
    with pytest.raises(ValueError):
        adam_step(AdamState.zeros(3), x, np.zeros(2), 0.1)


def test_adam_decreases_quadratic():
    A = spd(5, 1)
    loss = lambda x: 0.5 * x @ A @ x
    x = np.ones(5)
    opt = AdamState.zeros(5)
    start = loss(x)
    for _ in range(500):
        x = adam_step(opt, x, A @ x, 0.01)
    assert loss(x) < 1e-3 * start


def test_lbfgs_quadratic():
    f = lambda x: (0.5 * x @ x, x.copy())
    x = np.array([1.0, 1.0])
    opt = LbfgsState()
    for _ in range(10):
        prev = f(x)[0]
        x = lbfgs_step(opt, x, f, 1.0)
        assert f(x)[0] < prev or np.linalg.norm(x) == 0.0
        if np.linalg.norm(x) <= 1e-8:
            break
    assert np.linalg.norm(x) <= 1e-8


def test_lbfgs_zero_gradient_and_history_bound():
    f = lambda x: (float(np.sum(x ** 4)), 4 * x ** 3)
    x0 = np.zeros(3)
    assert np.array_equal(lbfgs_step(LbfgsState(), x0, f, 1.0), x0)
    opt = LbfgsState(memory=3)
    x = np.array([1.0, -0.5, 2.0])
    for _ in range(20):
        x = lbfgs_step(opt, x, f, 1.0)
        assert len(opt.s) <= 3


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def test_lbfgs_rosenbrock():
    x = np.array([-1.2, 1.0])
    opt = LbfgsState()
    for _ in range(200):
        x = lbfgs_step(opt, x, rosenbrock, 1.0)
    assert rosenbrock(x)[0] < 1e-6


def test_lbfgs_rejects_ascent_and_falls_back():
    # the reported gradient points uphill, so no trial can satisfy Armijo
    f = lambda x: (float(x @ x), -2 * x)
    opt = LbfgsState()
    x = np.array([1.0, 2.0])
    out = lbfgs_step(opt, x, f, 1.0)
    assert np.array_equal(out, x)
    assert opt.steepest and not opt.s and not opt.last["accepted"]
