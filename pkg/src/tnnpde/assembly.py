"""Dimension-wise integration of separable sums.

Every d-dimensional integral here is a sum over term pairs of products of
1-D weighted dot products, so its cost is polynomial in d.  The central type
is :class:`CP`, a separable sum tabulated on a :class:`~tnnpde.tnn.Layout`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from .autodiff import DTYPE
from .expr import SeparableFn
from .tnn import EvalTables, Layout


@dataclass
class CP:
    """sum_t coef[t] prod_i F[i, :, t] sampled on the layout rows."""

    coef: torch.Tensor
    F: torch.Tensor

    @property
    def rank(self) -> int:
        return self.coef.shape[0]

    def __mul__(self, s: float) -> "CP":
        return CP(self.coef * s, self.F)

    __rmul__ = __mul__

    def __neg__(self) -> "CP":
        return CP(-self.coef, self.F)

    def __add__(self, other: "CP") -> "CP":
        return concat(self, other)

    def __sub__(self, other: "CP") -> "CP":
        return concat(self, -other)


def concat(*parts: CP) -> CP:
    parts = [p for p in parts if p is not None and p.rank > 0]
    return CP(torch.cat([p.coef for p in parts]), torch.cat([p.F for p in parts], dim=2))


def product(a: CP, b: CP) -> CP:
    """Pointwise product: rank(a) * rank(b) terms, factors multiplied per row."""
    d, R = a.F.shape[:2]
    F = (a.F[:, :, :, None] * b.F[:, :, None, :]).reshape(d, R, -1)
    return CP((a.coef[:, None] * b.coef[None, :]).reshape(-1), F)


def grams(Fa: torch.Tensor, Fb: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """(d, Ta, Tb) weighted 1-D dot products of factor columns."""
    return torch.einsum("drt,dr,drs->dts", Fa, w, Fb)


def inner(a: CP, b: CP, w: torch.Tensor) -> torch.Tensor:
    """Integral of a * b under the per-dimension weights w (d, R)."""
    G = torch.prod(grams(a.F, b.F, w), dim=0)
    return a.coef @ G @ b.coef


def norm2(a: CP, w: torch.Tensor) -> torch.Tensor:
    return inner(a, a, w)


def _r_factor(Y: np.ndarray) -> np.ndarray:
    return np.linalg.qr(Y, mode="r")


def stable_norm(a: CP, w: torch.Tensor) -> float:
    """L2 norm of a separable sum without squaring its terms first.

    ``norm2`` expands the square, so cancellation between large terms limits
    it to about sqrt(eps) times their size.  Here each dimension is absorbed
    with a QR factorization, the term sum is taken last, and the error stays
    near eps times the term size.  Value only: no gradient.
    """
    coef = a.coef.detach().numpy()
    F = a.F.detach().numpy()
    W = np.asarray(w.detach().numpy() if isinstance(w, torch.Tensor) else w)
    if np.any(W < 0):
        raise ValueError("stable_norm needs non-negative weights")
    Z = None
    for i in range(F.shape[0]):
        B = _r_factor(np.sqrt(W[i])[:, None] * F[i])
        if Z is None:
            Y = B * coef[None, :]
        else:
            Y = (Z[:, None, :] * B[None, :, :]).reshape(-1, B.shape[1])
        Z = Y if i == F.shape[0] - 1 else _r_factor(Y)
    return float(np.linalg.norm(Z.sum(axis=1)))


# --- building CPs -------------------------------------------------------------


_SEP_CACHE: Dict[Tuple[int, int, bool], torch.Tensor] = {}


def sep_cp(fn: SeparableFn, layout: Layout, deriv_dim: Optional[int] = None) -> CP:
    """Tabulate a separable function (or its partial derivative in one dim)."""
    if fn.dim != layout.d:
        raise ValueError(f"function has dimension {fn.dim}, layout has {layout.d}")
    cols = []
    for i in range(layout.d):
        cols.append(fn.factor_values(i, layout.rows[i], derivative=(i == deriv_dim)))
    F = torch.as_tensor(np.stack(cols), dtype=DTYPE)
    return CP(torch.as_tensor(fn.coefs, dtype=DTYPE), F)


class SepTables:
    """Cached values and first derivatives of a SeparableFn on a layout."""

    def __init__(self, fn: SeparableFn, layout: Layout):
        self.fn = fn
        self.value = sep_cp(fn, layout)
        self._d1 = None
        self.layout = layout

    def d1(self) -> torch.Tensor:
        if self._d1 is None:
            cols = [self.fn.factor_values(i, self.layout.rows[i], derivative=True)
                    for i in range(self.layout.d)]
            self._d1 = torch.as_tensor(np.stack(cols), dtype=DTYPE)
        return self._d1

    def partial(self, s: int) -> CP:
        F = self.value.F.clone()
        F[s] = self.d1()[s]
        return CP(self.value.coef, F)


def _replace(base: torch.Tensor, subs: Dict[int, torch.Tensor]) -> torch.Tensor:
    F = base.clone() if subs else base
    for i, t in subs.items():
        F[i] = t[i]
    return F


def tnn_cp(tables: EvalTables, c, subs: Optional[Dict[int, str]] = None) -> CP:
    """Psi (or a partial derivative of it) as a CP.

    ``subs`` maps dimension -> 'd1' or 'd2' to differentiate that factor.
    """
    c = torch.as_tensor(c, dtype=DTYPE)
    which = {"d1": tables.D1, "d2": tables.D2}
    F = tables.V
    if subs:
        F = torch.stack([which[subs[i]][i] if i in subs else tables.V[i]
                         for i in range(tables.V.shape[0])])
    return CP(c, F)


def tnn_partials(tables: EvalTables, c) -> CP:
    """All first partials stacked: term block s is d/dx_s Psi (d * p terms)."""
    d, R, p = tables.V.shape
    eye = torch.eye(d, dtype=torch.bool)[:, None, :, None]
    F = torch.where(eye, tables.D1[:, :, None, :], tables.V[:, :, None, :]).reshape(d, R, d * p)
    return F


def div_a_grad(tables: EvalTables, c, A: np.ndarray) -> CP:
    """div(A grad Psi) for a constant symmetric matrix A."""
    d, R, p = tables.V.shape
    c = torch.as_tensor(c, dtype=DTYPE)
    A = np.asarray(A, dtype=np.float64)
    diag = np.diag(A).copy()
    pieces = []
    s_idx = [s for s in range(d) if diag[s] != 0.0]
    if s_idx:
        eye = torch.eye(d, dtype=torch.bool)[:, s_idx][:, None, :, None]
        F = torch.where(eye, tables.D2[:, :, None, :], tables.V[:, :, None, :])
        coef = torch.as_tensor(diag[s_idx], dtype=DTYPE)[:, None] * c[None, :]
        pieces.append(CP(coef.reshape(-1), F.reshape(d, R, -1)))
    for s in range(d):
        for t in range(d):
            if s != t and A[s, t] != 0.0:
                pieces.append(CP(A[s, t] * c, _replace(tables.V, {s: tables.D1, t: tables.D1})))
    if not pieces:
        return CP(torch.zeros(0, dtype=DTYPE), tables.V[:, :, :0])
    return concat(*pieces)


def flux_normal(tables: EvalTables, c, A: np.ndarray, i: int, side: str) -> CP:
    """(A grad Psi) . n on the face x_i = a_i (n = -e_i) or x_i = b_i (n = +e_i)."""
    sign = -1.0 if side == "a" else 1.0
    c = torch.as_tensor(c, dtype=DTYPE)
    pieces = []
    for t in range(tables.V.shape[0]):
        if A[i, t] != 0.0:
            pieces.append(CP(sign * A[i, t] * c, _replace(tables.V, {t: tables.D1})))
    return concat(*pieces)


def sep_flux_normal(st: SepTables, A: np.ndarray, i: int, side: str) -> CP:
    sign = -1.0 if side == "a" else 1.0
    pieces = [sign * A[i, t] * st.partial(t) for t in range(st.layout.d) if A[i, t] != 0.0]
    return concat(*pieces)


# --- Galerkin matrices ----------------------------------------------------------


def _prod_except(G: torch.Tensor) -> torch.Tensor:
    """out[s] = prod_{i != s} G[i] via prefix/suffix products."""
    d = G.shape[0]
    ones = torch.ones_like(G[0])
    prefix = [ones]
    for i in range(d - 1):
        prefix.append(prefix[-1] * G[i])
    suffix = [ones]
    for i in range(d - 1, 0, -1):
        suffix.append(suffix[-1] * G[i])
    suffix = suffix[::-1]
    return torch.stack([prefix[s] * suffix[s] for s in range(d)])


def stiffness_matrix(rows: EvalTables, A: np.ndarray, b: Optional[CP] = None,
                     cols: Optional[EvalTables] = None, w: Optional[torch.Tensor] = None):
    """S[m, n] = (A grad phi_n, grad phi_m) + (b phi_n, phi_m), phi_m from ``rows``."""
    cols = rows if cols is None else cols
    w = rows.layout.t_weights() if w is None else w
    A = np.asarray(A, dtype=np.float64)
    d = rows.V.shape[0]
    G0 = grams(rows.V, cols.V, w)
    out = torch.zeros(rows.V.shape[2], cols.V.shape[2], dtype=DTYPE)
    diag = np.diag(A).copy()
    if np.any(diag != 0.0):
        G1 = grams(rows.D1, cols.D1, w)
        others = _prod_except(G0)
        out = out + torch.einsum("s,smn->mn", torch.as_tensor(diag, dtype=DTYPE), G1 * others)
    off = [(s, t) for s in range(d) for t in range(d) if s != t and A[s, t] != 0.0]
    if off:
        X = grams(rows.D1, cols.V, w)
        Y = grams(rows.V, cols.D1, w)
        for s, t in off:
            term = X[s] * Y[t]
            for i in range(d):
                if i != s and i != t:
                    term = term * G0[i]
            out = out + A[s, t] * term
    if b is not None and b.rank > 0:
        Gb = torch.einsum("drm,dr,drk,drn->dkmn", rows.V, w, b.F, cols.V)
        out = out + torch.einsum("k,kmn->mn", b.coef, torch.prod(Gb, dim=0))
    return out


def mass_matrix(rows: EvalTables, cols: Optional[EvalTables] = None,
                w: Optional[torch.Tensor] = None) -> torch.Tensor:
    cols = rows if cols is None else cols
    w = rows.layout.t_weights() if w is None else w
    return torch.prod(grams(rows.V, cols.V, w), dim=0)


def load_vector(rows: EvalTables, f: CP, w: Optional[torch.Tensor] = None) -> torch.Tensor:
    """B[m] = (f, phi_m)."""
    w = rows.layout.t_weights() if w is None else w
    return torch.prod(grams(rows.V, f.F, w), dim=0) @ f.coef


def boundary_load(rows: EvalTables, g_faces: Dict[Tuple[int, str], CP]) -> torch.Tensor:
    """sum over faces of (g, phi_m) on that face."""
    layout = rows.layout
    total = torch.zeros(rows.V.shape[2], dtype=DTYPE)
    for face in layout.faces():
        if face not in g_faces:
            raise ValueError(f"no boundary data for face {face}")
        total = total + load_vector(rows, g_faces[face], layout.face_weights(*face))
    return total


def boundary_mass(rows: EvalTables) -> torch.Tensor:
    layout = rows.layout
    total = torch.zeros(rows.V.shape[2], rows.V.shape[2], dtype=DTYPE)
    for face in layout.faces():
        total = total + mass_matrix(rows, w=layout.face_weights(*face))
    return total


# --- public numpy-facing wrappers -----------------------------------------------


def _b_cp(b, layout: Layout) -> Optional[CP]:
    if b is None:
        return None
    if isinstance(b, CP):
        return b
    if isinstance(b, (int, float)):
        if b == 0.0:
            return None
        return sep_cp(SeparableFn.constant(float(b), layout.d), layout)
    return sep_cp(b, layout)


def assemble_stiffness(tables: EvalTables, A, b=None) -> np.ndarray:
    """Dense symmetric stiffness matrix (numpy); b is a SeparableFn, scalar or None."""
    with torch.no_grad():
        S = stiffness_matrix(tables.detach(), A, _b_cp(b, tables.layout))
    return S.numpy()


def assemble_mass(tables: EvalTables) -> np.ndarray:
    with torch.no_grad():
        return mass_matrix(tables.detach()).numpy()


def assemble_load(tables: EvalTables, f: SeparableFn) -> np.ndarray:
    with torch.no_grad():
        return load_vector(tables.detach(), sep_cp(f, tables.layout)).numpy()


def face_cps(g, layout: Layout) -> Dict[Tuple[int, str], CP]:
    """Per-face CPs from a single SeparableFn or a {(i, side): SeparableFn} map."""
    if isinstance(g, SeparableFn):
        cp = sep_cp(g, layout)
        return {face: cp for face in layout.faces()}
    return {face: sep_cp(fn, layout) for face, fn in g.items()}


def assemble_neumann_load(tables: EvalTables, g) -> np.ndarray:
    """Boundary contribution (g, phi_m) summed over the 2d faces."""
    with torch.no_grad():
        return boundary_load(tables.detach(), face_cps(g, tables.layout)).numpy()
