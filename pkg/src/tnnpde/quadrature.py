"""One-dimensional quadrature rules.

Every integral in the package reduces to weighted sums over the grids built
here, so the accuracy of the whole solver is bounded by these rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

BOUNDED = "bounded-composite"
HERMITE = "hermite-line"

_NEWTON_TOL = 1e-15
_NEWTON_MAXITER = 100


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class QuadGrid:
    """Nodes and positive weights of a 1-D rule.

    For ``hermite-line`` grids the Gaussian weight function is already folded
    into ``weights``, so integrands are sampled raw.
    """

    nodes: np.ndarray
    weights: np.ndarray
    kind: str = BOUNDED
    interval: Optional[Tuple[float, float]] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes))
        object.__setattr__(self, "weights", _frozen(self.weights))
        if self.nodes.shape != self.weights.shape or self.nodes.ndim != 1:
            raise ValueError("nodes and weights must be 1-D arrays of equal length")
        if self.kind not in (BOUNDED, HERMITE):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.kind == BOUNDED and self.interval is None:
            raise ValueError("bounded grids need an interval")

    def __len__(self):
        return self.nodes.size

    @property
    def bounded(self) -> bool:
        return self.kind == BOUNDED


def gauss_legendre(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """n-point Gauss-Legendre rule on [-1, 1], nodes ascending.

    Nodes are Newton-polished roots of P_n evaluated by the three-term
    recurrence; weights are ``2 / ((1 - x^2) P_n'(x)^2)``.
    """
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= 64:
        raise ValueError(f"gauss_legendre needs 1 <= n <= 64, got {n!r}")
    n = int(n)
    m = (n + 1) // 2
    x = np.empty(n)
    w = np.empty(n)
    for k in range(m):
        z = math.cos(math.pi * (k + 0.75) / (n + 0.5))
        for _ in range(_NEWTON_MAXITER):
            p0, p1 = 1.0, z
            for j in range(2, n + 1):
                p0, p1 = p1, ((2 * j - 1) * z * p1 - (j - 1) * p0) / j
            dp = n * (z * p1 - p0) / (z * z - 1.0)
            dz = p1 / dp
            z -= dz
            if abs(dz) < _NEWTON_TOL:
                break
        # recompute the derivative at the converged root
        p0, p1 = 1.0, z
        for j in range(2, n + 1):
            p0, p1 = p1, ((2 * j - 1) * z * p1 - (j - 1) * p0) / j
        dp = n * (z * p1 - p0) / (z * z - 1.0)
        wk = 2.0 / ((1.0 - z * z) * dp * dp)
        x[k], x[n - 1 - k] = -z, z
        w[k] = w[n - 1 - k] = wk
    if n % 2 == 1:
        x[m - 1] = 0.0
    return x, w


def composite_grid(interval: Tuple[float, float], n_sub: int, n_pts: int) -> QuadGrid:
    """Gauss-Legendre rule repeated on ``n_sub`` equal panels of ``interval``."""
    a, b = float(interval[0]), float(interval[1])
    if not a < b:
        raise ValueError(f"composite_grid needs a < b, got ({a}, {b})")
    if n_sub < 1:
        raise ValueError("n_sub must be positive")
    ref_x, ref_w = gauss_legendre(n_pts)
    h = (b - a) / n_sub
    left = a + h * np.arange(n_sub)
    nodes = (left[:, None] + 0.5 * h * (ref_x[None, :] + 1.0)).ravel()
    weights = np.tile(0.5 * h * ref_w, n_sub)
    return QuadGrid(nodes, weights, BOUNDED, (a, b), {"n_sub": n_sub, "n_pts": n_pts})


def _hermite_recurrence(z: float, n: int) -> Tuple[float, float, float]:
    """Scaled orthonormal Hermite polynomials at z.

    Returns ``(p_n, p_{n-1}, log_scale)`` with the true values equal to
    ``p * exp(log_scale)``; rescaling keeps large |z| and n from overflowing.
    """
    p_prev = 0.0
    p = math.pi ** -0.25
    log_scale = 0.0
    for j in range(1, n + 1):
        p_prev, p = p, z * math.sqrt(2.0 / j) * p - math.sqrt((j - 1) / j) * p_prev
        if abs(p) > 1e100:
            p *= 1e-100
            p_prev *= 1e-100
            log_scale += 100.0 * math.log(10.0)
    return p, p_prev, log_scale


def _hermite_guess(k: int, n: int) -> float:
    """WKB estimate of the k-th largest zero of H_n (k = 1, 2, ...).

    Solves ``tau - sin(tau) = pi (4k - 1) / (2n + 1)`` and maps
    ``x = sqrt(2n + 1) cos(tau / 2)``; accurate to well under the root spacing.
    """
    nu = 2 * n + 1
    t = math.pi * (4 * k - 1) / nu
    tau = max(t, (6.0 * t) ** (1 / 3))
    for _ in range(60):
        step = (tau - math.sin(tau) - t) / (1.0 - math.cos(tau))
        tau -= step
        if abs(step) < 1e-15:
            break
    return math.sqrt(nu) * math.cos(0.5 * tau)


def gauss_hermite(n: int) -> QuadGrid:
    """n-point Gauss-Hermite rule for integrals over the whole real line.

    Weights are returned premultiplied by ``exp(x_i**2)``:
    ``sum(w * f(x)) ~ integral of f`` for integrands with Gaussian decay.
    """
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= 300:
        raise ValueError(f"gauss_hermite needs 1 <= n <= 300, got {n!r}")
    n = int(n)
    m = (n + 1) // 2
    roots = np.empty(m)
    for i in range(m):
        z = _hermite_guess(i + 1, n)
        for _ in range(_NEWTON_MAXITER):
            p_n, p_nm1, _ = _hermite_recurrence(z, n)
            dz = p_n / (math.sqrt(2.0 * n) * p_nm1)
            z -= dz
            if abs(dz) < _NEWTON_TOL * max(1.0, abs(z)):
                break
        roots[i] = z
    if n % 2 == 1:
        roots[m - 1] = 0.0
    pos = roots[::-1]
    nodes = np.concatenate([-roots, pos[1:] if n % 2 else pos])
    weights = np.empty(n)
    for k, z in enumerate(nodes):
        # exp(z^2) * w_k with w_k = 1 / (n p_{n-1}(z)^2)
        _, p_nm1, log_scale = _hermite_recurrence(z, n)
        log_psi = math.log(abs(p_nm1)) + log_scale - 0.5 * z * z
        weights[k] = math.exp(-2.0 * log_psi) / n
    if np.any(np.diff(nodes) <= 0):
        raise ArithmeticError("Hermite root polishing failed to separate nodes")
    return QuadGrid(nodes, weights, HERMITE, None, {"n": n})


def integrate_1d(grid: QuadGrid, samples: Sequence[float]) -> float:
    """Weighted sum with index-ascending accumulation."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape != grid.weights.shape:
        raise ValueError(
            f"expected {grid.weights.size} samples, got {samples.size}"
        )
    total = 0.0
    for w, s in zip(grid.weights.tolist(), samples.tolist()):
        total += w * s
    return total
