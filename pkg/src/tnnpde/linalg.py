"""Small dense solves and the two first-order optimizers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from .autodiff import NumericalError

log = logging.getLogger(__name__)

JITTER_LEVELS = (0.0, 1e-14, 1e-12, 1e-10)


class SingularSystemError(NumericalError):
    pass


def _symmetrize(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expected a square matrix")
    return 0.5 * (A + A.T)


def jittered_cholesky(A) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of A + tau*trace(A)/p*I with the smallest tau that works.

    Returns ``(L, tau)``; tau is 0 when no jitter was needed.
    """
    A = _symmetrize(A)
    if not np.all(np.isfinite(A)):
        raise SingularSystemError("matrix has non-finite entries")
    p = A.shape[0]
    scale = np.trace(A) / p
    for tau in JITTER_LEVELS:
        try:
            L = sla.cholesky(A + tau * scale * np.eye(p), lower=True)
        except np.linalg.LinAlgError:
            continue
        if tau > 0:
            log.info("cholesky needed jitter tau=%g", tau)
        return L, tau
    raise SingularSystemError(f"Cholesky failed at every jitter level up to {JITTER_LEVELS[-1]:g}")


def cholesky_solve(A, B, return_jitter: bool = False):
    """Solve the symmetric positive definite system A c = B."""
    L, tau = jittered_cholesky(A)
    c = sla.cho_solve((L, True), np.asarray(B, dtype=np.float64))
    return (c, tau) if return_jitter else c


def _fix_sign(c: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(c)
    if nz.size and c[nz[0]] < 0:
        c = -c
    return c


def smallest_generalized_eigpair(A, M, return_jitter: bool = False):
    """Smallest eigenpair of A c = lam M c with c^T M c = 1.

    M is Cholesky-factored (with jitter if needed) and the pencil reduced to
    the standard symmetric problem L^-1 A L^-T.
    """
    A = _symmetrize(A)
    L, tau = jittered_cholesky(M)
    X = sla.solve_triangular(L, A, lower=True)
    C = sla.solve_triangular(L, X.T, lower=True)
    C = 0.5 * (C + C.T)
    vals, vecs = sla.eigh(C, subset_by_index=[0, 0])
    lam = float(vals[0])
    c = sla.solve_triangular(L.T, vecs[:, 0], lower=False)
    Mj = _symmetrize(M)
    c = c / np.sqrt(c @ Mj @ c)
    c = _fix_sign(c)
    return (lam, c, tau) if return_jitter else (lam, c)


# --- optimizers -----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(opt: AdamState, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; the state is modified in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != opt.m.shape or np.shape(params) != opt.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient; Adam step skipped")
    opt.t += 1
    opt.m = opt.beta1 * opt.m + (1 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1 - opt.beta2) * grad * grad
    m_hat = opt.m / (1 - opt.beta1 ** opt.t)
    v_hat = opt.v / (1 - opt.beta2 ** opt.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + opt.eps)


@dataclass
class LbfgsState:
    s: List[np.ndarray] = field(default_factory=list)
    y: List[np.ndarray] = field(default_factory=list)
    memory: int = 10
    c1: float = 1e-4
    max_trials: int = 25
    steepest: bool = False
    last: dict = field(default_factory=dict)

    def clear(self):
        self.s.clear()
        self.y.clear()


def _two_loop(opt: LbfgsState, g: np.ndarray) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(opt.s), reversed(opt.y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho))
        q -= a * y
    s, y = opt.s[-1], opt.y[-1]
    q *= (s @ y) / (y @ y)
    for (a, rho), s, y in zip(reversed(alphas), opt.s, opt.y):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_step(opt: LbfgsState, params: np.ndarray,
               loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]], lr: float) -> np.ndarray:
    """One L-BFGS iteration with a backtracking Armijo search starting at ``lr``.

    ``opt.last`` records the loss before and after, the number of trials and
    whether the step was accepted.
    """
    params = np.asarray(params, dtype=np.float64)
    f0, g0 = loss_fn(params)
    g0 = np.asarray(g0, dtype=np.float64)
    if not (np.isfinite(f0) and np.all(np.isfinite(g0))):
        raise NumericalError("non-finite loss or gradient at the L-BFGS start point")
    opt.last = {"f0": float(f0), "f": float(f0), "trials": 0, "accepted": False}
    gnorm1 = np.abs(g0).sum()
    if gnorm1 == 0.0:
        return params
    if opt.s and not opt.steepest:
        direction = _two_loop(opt, g0)
        if direction @ g0 >= 0:
            opt.clear()
            direction = -g0 * min(1.0, 1.0 / gnorm1)
    else:
        direction = -g0 * min(1.0, 1.0 / gnorm1)
    opt.steepest = False
    slope = float(direction @ g0)
    t = lr
    for trial in range(1, opt.max_trials + 1):
        x = params + t * direction
        try:
            f, g = loss_fn(x)
        except ArithmeticError:
            f, g = np.inf, None
        if np.isfinite(f) and f <= f0 + opt.c1 * t * slope:
            g = np.asarray(g, dtype=np.float64)
            s, y = x - params, g - g0
            if s @ y > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
                opt.s.append(s)
                opt.y.append(y)
                if len(opt.s) > opt.memory:
                    opt.s.pop(0)
                    opt.y.pop(0)
            opt.last = {"f0": float(f0), "f": float(f), "trials": trial, "accepted": True}
            return x
        t *= 0.5
    opt.clear()
    opt.steepest = True
    opt.last = {"f0": float(f0), "f": float(f0), "trials": opt.max_trials, "accepted": False}
    return params
