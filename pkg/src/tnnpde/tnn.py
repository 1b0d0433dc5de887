"""Rank-p tensor neural network ansatz and its quadrature tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .autodiff import DTYPE, forward_jets, param_count
from .quadrature import QuadGrid

DEGENERATE_NORM = 1e-12

Interval = Optional[Tuple[float, float]]  # None marks the whole real line


class DegenerateBasisError(ArithmeticError):
    pass


@dataclass
class Layout:
    """Per-dimension quadrature rows stacked into (d, R) arrays.

    Bounded dimensions carry two extra rows holding the interval endpoints
    (zero quadrature weight); they serve boundary-face integrals.
    """

    rows: np.ndarray
    weights: np.ndarray
    n_nodes: int
    intervals: List[Interval]
    grids: List[QuadGrid] = field(repr=False, default_factory=list)

    @classmethod
    def from_grids(cls, grids: Sequence[QuadGrid]) -> "Layout":
        grids = list(grids)
        kinds = {g.bounded for g in grids}
        sizes = {len(g) for g in grids}
        if len(kinds) != 1 or len(sizes) != 1:
            raise ValueError("all dimensions must share one grid kind and node count")
        bounded = kinds.pop()
        n = sizes.pop()
        rows, weights = [], []
        for g in grids:
            if bounded:
                rows.append(np.concatenate([g.nodes, g.interval]))
                weights.append(np.concatenate([g.weights, [0.0, 0.0]]))
            else:
                rows.append(np.array(g.nodes))
                weights.append(np.array(g.weights))
        intervals = [g.interval if bounded else None for g in grids]
        return cls(np.array(rows), np.array(weights), n, intervals, grids)

    @property
    def d(self) -> int:
        return self.rows.shape[0]

    @property
    def bounded(self) -> bool:
        return self.intervals[0] is not None

    def t_rows(self) -> torch.Tensor:
        return torch.as_tensor(self.rows, dtype=DTYPE)

    def t_weights(self) -> torch.Tensor:
        return torch.as_tensor(self.weights, dtype=DTYPE)

    def face_weights(self, i: int, side: str) -> torch.Tensor:
        """Weights for the face x_i = a_i (side 'a') or x_i = b_i (side 'b')."""
        if not self.bounded:
            raise ValueError("faces exist only on bounded domains")
        w = self.weights.copy()
        w[i, :] = 0.0
        w[i, self.n_nodes + (0 if side == "a" else 1)] = 1.0
        return torch.as_tensor(w, dtype=DTYPE)

    def faces(self):
        for i in range(self.d):
            for side in ("a", "b"):
                yield i, side


@dataclass
class TnnState:
    """Parameters of Psi(x) = sum_j c_j prod_i phi_ij(x_i).

    ``theta`` holds one flat parameter row per dimension.  With ``mask`` set,
    every bounded factor is multiplied by (x - a)(b - x); whole-line
    dimensions always carry the decay envelope exp(-x^2 / 2).
    """

    d: int
    p: int
    hidden: Tuple[int, ...]
    theta: np.ndarray
    c: np.ndarray
    domain: List[Interval]
    mask: bool = True
    activation: str = "sin"

    @property
    def arch(self) -> Tuple[int, ...]:
        return (1, *self.hidden, self.p)

    @property
    def n_params(self) -> int:
        return param_count(self.arch)

    def copy(self) -> "TnnState":
        return TnnState(self.d, self.p, tuple(self.hidden), self.theta.copy(),
                        self.c.copy(), list(self.domain), self.mask, self.activation)


def init(d: int, p: int, hidden: Sequence[int], domain: Sequence[Interval],
         seed: Union[int, np.random.Generator] = 0, mask: bool = True) -> TnnState:
    """Fresh state: weights and biases uniform in +-sqrt(1 / fan_in), c = 1."""
    if d < 1 or p < 1:
        raise ValueError("d and p must be positive")
    if len(domain) != d:
        raise ValueError("need one interval (or None) per dimension")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arch = (1, *hidden, p)
    theta = np.empty((d, param_count(arch)))
    for i in range(d):
        chunks = []
        for k in range(len(arch) - 1):
            fan_in, out = arch[k], arch[k + 1]
            bound = np.sqrt(1.0 / fan_in)
            chunks.append(rng.uniform(-bound, bound, size=out * fan_in))
            chunks.append(rng.uniform(-bound, bound, size=out))
        theta[i] = np.concatenate(chunks)
    return TnnState(d, p, tuple(int(h) for h in hidden), theta, np.ones(p),
                    [None if iv is None else (float(iv[0]), float(iv[1])) for iv in domain],
                    mask)


@dataclass
class EvalTables:
    """Normalized basis values and input derivatives on the layout rows.

    V, D1, D2 have shape (d, R, p); ``norms`` is (d, p).  Tensors stay on the
    autograd graph of the parameters they were built from.
    """

    V: torch.Tensor
    D1: torch.Tensor
    D2: torch.Tensor
    norms: torch.Tensor
    layout: Layout

    def detach(self) -> "EvalTables":
        return EvalTables(self.V.detach(), self.D1.detach(), self.D2.detach(),
                          self.norms.detach(), self.layout)


def _envelope(state: TnnState, x: torch.Tensor):
    """Multiplier h and its derivatives, each shaped like x (d, R)."""
    one = torch.ones_like(x)
    zero = torch.zeros_like(x)
    hs, h1s, h2s = [], [], []
    for i, iv in enumerate(state.domain):
        xi = x[i]
        if iv is None:
            g = torch.exp(-0.5 * xi * xi)
            hs.append(g)
            h1s.append(-xi * g)
            h2s.append((xi * xi - 1.0) * g)
        elif state.mask:
            a, b = iv
            hs.append((xi - a) * (b - xi))
            h1s.append(a + b - 2.0 * xi)
            h2s.append(-2.0 * one[i])
        else:
            hs.append(one[i])
            h1s.append(zero[i])
            h2s.append(zero[i])
    return torch.stack(hs), torch.stack(h1s), torch.stack(h2s)


def raw_jets(state: TnnState, x: torch.Tensor, theta: Optional[torch.Tensor] = None):
    """Masked, unnormalized factor jets at x of shape (d, R)."""
    if theta is None:
        theta = torch.as_tensor(state.theta, dtype=DTYPE)
    jet = forward_jets(theta, state.arch, x)
    h, h1, h2 = (t[:, :, None] for t in _envelope(state, x))
    V = jet.v * h
    D1 = jet.d1 * h + jet.v * h1
    D2 = jet.d2 * h + 2.0 * jet.d1 * h1 + jet.v * h2
    return V, D1, D2


def eval_tables(state: TnnState, layout: Layout,
                theta: Optional[torch.Tensor] = None) -> EvalTables:
    """Run every subnetwork over its rows and L2-normalize each column.

    Pass ``theta`` as a tensor requiring grad to keep the tables on the tape;
    otherwise they are built from ``state.theta`` without a graph.
    """
    if layout.d != state.d:
        raise ValueError("layout dimension does not match the state")
    for iv, jv in zip(layout.intervals, state.domain):
        if (iv is None) != (jv is None) or (iv is not None and tuple(iv) != tuple(jv)):
            raise ValueError("grids do not match the state's domain")
    grad_ctx = torch.enable_grad() if theta is not None else torch.no_grad()
    with grad_ctx:
        V, D1, D2 = raw_jets(state, layout.t_rows(), theta)
        w = layout.t_weights()
        norms = torch.sqrt(torch.einsum("drp,dr->dp", V * V, w))
        if torch.any(norms < DEGENERATE_NORM) or not torch.all(torch.isfinite(norms)):
            bad = torch.nonzero(~(norms >= DEGENERATE_NORM)).tolist()
            raise DegenerateBasisError(f"basis columns (dim, rank) {bad[:5]} have vanishing norm")
        inv = (1.0 / norms)[:, None, :]
        return EvalTables(V * inv, D1 * inv, D2 * inv, norms, layout)


def value_at(state: TnnState, x, layout: Layout, c=None) -> np.ndarray:
    """Pointwise Psi at points of shape (n, d) or (d,); diagnostics only."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != state.d:
        raise ValueError(f"points need {state.d} coordinates")
    for i, iv in enumerate(state.domain):
        if iv is not None and (np.any(x[:, i] < iv[0]) or np.any(x[:, i] > iv[1])):
            raise ValueError(f"coordinate {i} lies outside {iv}")
    c = state.c if c is None else np.asarray(c, dtype=np.float64)
    with torch.no_grad():
        norms = eval_tables(state, layout).norms
        V, _, _ = raw_jets(state, torch.as_tensor(x.T.copy(), dtype=DTYPE))
        V = V / norms[:, None, :]
        vals = torch.prod(V, dim=0) @ torch.as_tensor(c, dtype=DTYPE)
    out = vals.numpy()
    return out[0] if single else out
