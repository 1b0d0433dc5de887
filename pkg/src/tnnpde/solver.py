"""Estimator losses, Galerkin coefficient solves and the training loops.

Each epoch fixes the network parameters, solves the small Galerkin system
(or pencil) for the coefficients, then takes one optimizer step on the
network parameters.  By default the gradient of that step includes the
response of the solved coefficients (implicit differentiation of the solve);
``coef_grad="fixed"`` treats them as constants instead.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import torch

from . import assembly as asm
from .assembly import CP, SepTables, concat, inner, norm2, product, stable_norm
from .autodiff import DTYPE, NumericalError, backward
from .expr import SeparableFn
from .linalg import (AdamState, LbfgsState, adam_step, cholesky_solve, jittered_cholesky,
                     lbfgs_step, smallest_generalized_eigpair)
from .problems import ProblemSpec
from .tnn import DegenerateBasisError, EvalTables, Layout, TnnState, eval_tables, init

log = logging.getLogger(__name__)

LOSS_FLOOR = 1e-30
METRIC_KEYS = ("e_l2", "e_h1", "e_lambda", "e_bd")


class TrainingError(ArithmeticError):
    """Training aborted; ``report`` holds the records written so far."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


# --- discretized problem data --------------------------------------------------------


class Discretization:
    """Grids, tabulated problem data and loss weights for one ProblemSpec."""

    def __init__(self, problem: ProblemSpec):
        self.problem = problem
        self.layout = Layout.from_grids(problem.grid.build(problem.domain))
        L = self.layout
        self.A = np.asarray(problem.A, dtype=np.float64)
        self.w = L.t_weights()
        self.f = asm.sep_cp(problem.f, L) if problem.f is not None else None
        b = problem.b
        if problem.b_is_zero:
            self.b_const, self.b = 0.0, None
        elif isinstance(b, (int, float)):
            self.b_const, self.b = float(b), asm._b_cp(float(b), L)
        else:
            self.b_const, self.b = None, asm.sep_cp(b, L)
        self.w_int, self.int_scale, self.weighted = self._interior_weights()
        self.g = asm.face_cps(problem.face_data(), L) if problem.g is not None else None
        self.exact = SepTables(problem.exact_u, L) if problem.exact_u is not None else None
        self.f_norm = float(torch.sqrt(norm2(self.f, self.w))) if self.f is not None else None
        if self.g is not None:
            self.g_norm = float(torch.sqrt(sum(norm2(self.g[fc], L.face_weights(*fc))
                                               for fc in L.faces())))

    def _interior_weights(self):
        """Weights realising ||b^{-1/2} r||^2 when b^{-1} is separable, else plain L2."""
        if self.b is None:
            return self.w, 1.0, False
        if self.b_const is not None:
            return self.w, 1.0 / self.b_const, True
        if self.b.rank != 1:
            return self.w, 1.0, False
        F = self.b.F[:, :, 0]
        active = self.w > 0
        signs = []
        for i in range(F.shape[0]):
            vals = F[i][active[i]]
            if torch.all(vals > 0):
                signs.append(1.0)
            elif torch.all(vals < 0):
                signs.append(-1.0)
            else:
                return self.w, 1.0, False
        coef = float(self.b.coef[0]) * float(np.prod(signs))
        if coef <= 0:
            return self.w, 1.0, False
        safe = torch.where(active, F.abs(), torch.ones_like(F))
        return torch.where(active, self.w / safe, torch.zeros_like(self.w)), 1.0 / coef, True

    def b_times(self, u: CP) -> Optional[CP]:
        if self.b is None:
            return None
        if self.b_const is not None:
            return self.b_const * u
        return product(self.b, u)


@dataclass
class Lift:
    """Frozen boundary-fitting network entering the interior phase as data."""

    tables: EvalTables
    c: torch.Tensor


@dataclass
class Coefficients:
    c: np.ndarray
    lam: Optional[float] = None
    jitter: float = 0.0


def _psi(tables: EvalTables, c) -> CP:
    return CP(torch.as_tensor(c, dtype=DTYPE), tables.V)


def _partial(tables: EvalTables, c, s: int) -> CP:
    F = torch.stack([tables.D1[i] if i == s else tables.V[i] for i in range(tables.V.shape[0])])
    return CP(torch.as_tensor(c, dtype=DTYPE), F)


# --- coefficient solves --------------------------------------------------------------


def _system(disc: Discretization, T: EvalTables, objective: str, lift: Optional[Lift]):
    """Matrices of the coefficient problem, on whatever graph T carries.

    Returns (S, B) for linear solves or (S, M) for the eigen pencil.
    """
    if objective == "boundary":
        return asm.boundary_mass(T), asm.boundary_load(T, disc.g)
    S = asm.stiffness_matrix(T, disc.A, disc.b)
    if disc.problem.kind == "eigen":
        return S, asm.mass_matrix(T)
    B = asm.load_vector(T, disc.f)
    if disc.problem.kind == "neumann":
        B = B + asm.boundary_load(T, disc.g)
    if lift is not None:
        B = B - asm.stiffness_matrix(T, disc.A, disc.b, cols=lift.tables) @ lift.c
    return S, B


def solve_coefficients(disc: Discretization, tables: EvalTables, objective: str = "estimator",
                       lift: Optional[Lift] = None) -> Coefficients:
    """Galerkin system A c = B, the smallest pencil pair, or the boundary least-squares fit."""
    with torch.no_grad():
        S, B = (t.numpy() for t in _system(disc, tables.detach(), objective, lift))
    if objective != "boundary" and disc.problem.kind == "eigen":
        lam, c, tau = smallest_generalized_eigpair(S, B, return_jitter=True)
        return Coefficients(c, lam, tau)
    c, tau = cholesky_solve(S, B, return_jitter=True)
    return Coefficients(c, None, tau)


def galerkin_coefficients(disc: Discretization, tables: EvalTables, lift: Optional[Lift] = None):
    return solve_coefficients(disc, tables, "estimator", lift)


def boundary_coefficients(disc: Discretization, tables: EvalTables) -> Coefficients:
    """Least-squares fit of the boundary data: M_bd c = B_bd."""
    return solve_coefficients(disc, tables, "boundary")


def _first_order(value: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    # value unchanged, derivative that of delta
    return value + (delta - delta.detach())


def attach_coefficients(disc: Discretization, tables: EvalTables, coef: Coefficients,
                        objective: str, lift: Optional[Lift] = None):
    """Put the solved coefficients back on the tape by implicit differentiation.

    Values stay exactly ``coef``; derivatives are those of the exact solve:
    dc = S^-1 (dB - dS c) for linear systems and, for the pencil,
    dlam = c^T (dS - lam dM) c and dc from the spectral expansion.
    """
    S_t, B_t = _system(disc, tables, objective, lift)
    c0 = torch.as_tensor(coef.c, dtype=DTYPE)
    with torch.no_grad():
        S = S_t.detach().numpy()
        B = B_t.detach().numpy()
    if coef.lam is None:
        L, _ = jittered_cholesky(S)
        r = B_t - S_t @ c0
        K = torch.as_tensor(sla.cho_solve((L, True), np.eye(S.shape[0])), dtype=DTYPE)
        return _first_order(c0, K @ r), None
    lam = coef.lam
    mu, V = sla.eigh(0.5 * (S + S.T), 0.5 * (B + B.T))
    V, mu = torch.as_tensor(V[:, 1:], dtype=DTYPE), torch.as_tensor(mu[1:], dtype=DTYPE)
    R = (S_t - lam * B_t) @ c0
    m = c0 @ B_t @ c0
    dc = V @ ((V.T @ R) / (lam - mu)) - 0.5 * m * c0
    lam_t = _first_order(torch.tensor(lam, dtype=DTYPE), c0 @ R)
    return _first_order(c0, dc), lam_t


# --- losses --------------------------------------------------------------------------


def interior_residual(disc: Discretization, tables: EvalTables, c, lam: Optional[float] = None,
                      lift: Optional[Lift] = None) -> CP:
    """f - b u_p + div(A grad u_p) (or lam u_p in place of f) as a separable sum."""
    psi = _psi(tables, c)
    parts = [lam * psi if lam is not None else disc.f, asm.div_a_grad(tables, c, disc.A)]
    bu = disc.b_times(psi)
    if bu is not None:
        parts.append(-bu)
    if lift is not None:
        parts.append(asm.div_a_grad(lift.tables, lift.c, disc.A))
        bl = disc.b_times(_psi(lift.tables, lift.c))
        if bl is not None:
            parts.append(-bl)
    return concat(*[p for p in parts if p is not None])


def _root(q: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.clamp(q, min=LOSS_FLOOR))


def estimator_loss_q(disc: Discretization, tables: EvalTables, c, lam=None, lift=None):
    """Squared estimator, before the square root."""
    r = interior_residual(disc, tables, c, lam, lift)
    q = disc.int_scale * inner(r, r, disc.w_int)
    if disc.problem.kind == "neumann":
        L = disc.layout
        for i, side in L.faces():
            e = disc.g[(i, side)] - asm.flux_normal(tables, c, disc.A, i, side)
            q = q + norm2(e, L.face_weights(i, side))
    return q


def estimator_q_stable(disc: Discretization, tables: EvalTables, c, lam=None, lift=None) -> float:
    """Value of ``estimator_loss_q`` without the expanded-square cancellation floor."""
    T = tables.detach()
    c = torch.as_tensor(np.asarray(c.detach() if isinstance(c, torch.Tensor) else c), dtype=DTYPE)
    lam = None if lam is None else float(lam)
    lift = None if lift is None else Lift(lift.tables.detach(), lift.c.detach())
    with torch.no_grad():
        q = disc.int_scale * stable_norm(interior_residual(disc, T, c, lam, lift), disc.w_int) ** 2
        if disc.problem.kind == "neumann":
            L = disc.layout
            for i, side in L.faces():
                e = disc.g[(i, side)] - asm.flux_normal(T, c, disc.A, i, side)
                q += stable_norm(e, L.face_weights(i, side)) ** 2
    return q


def _with_value(q_fast: torch.Tensor, q_value: float) -> torch.Tensor:
    # root of the accurate value, carrying the gradient of the fast expansion
    return _first_order(torch.tensor(math.sqrt(max(q_value, LOSS_FLOOR)), dtype=DTYPE), _root(q_fast))


def estimator_loss(problem, state: TnnState, tables: EvalTables, lam: Optional[float] = None,
                   lift: Optional[Lift] = None, disc: Optional[Discretization] = None):
    """Tape-connected estimator at the coefficients stored in ``state.c``.

    The value is computed with ``stable_norm``; the gradient is that of the
    expanded-square form used in training.
    """
    disc = disc or Discretization(problem)
    q = estimator_loss_q(disc, tables, state.c, lam, lift)
    return _with_value(q, estimator_q_stable(disc, tables, state.c, lam, lift))


def boundary_fit_q(disc: Discretization, tables: EvalTables, c):
    L = disc.layout
    psi = _psi(tables, c)
    q = torch.zeros((), dtype=DTYPE)
    for face in L.faces():
        q = q + norm2(psi - disc.g[face], L.face_weights(*face))
    return q


def boundary_fit_loss(problem, state: TnnState, tables: EvalTables,
                      disc: Optional[Discretization] = None):
    """||Psi_1 - g|| over the 2d faces."""
    disc = disc or Discretization(problem)
    q = boundary_fit_q(disc, tables, state.c)
    scale = disc.g_norm if disc.g_norm > 0 else 1.0
    return _with_value(q, (boundary_error(disc, tables, state.c) * scale) ** 2)


def rayleigh_quotient(disc: Discretization, tables: EvalTables, c) -> torch.Tensor:
    c = torch.as_tensor(c, dtype=DTYPE)
    S = asm.stiffness_matrix(tables, disc.A, disc.b)
    M = asm.mass_matrix(tables)
    return (c @ S @ c) / (c @ M @ c)


def rayleigh_loss(problem, state: TnnState, tables: EvalTables,
                  disc: Optional[Discretization] = None):
    """Smallest pencil eigenvalue; the eigenvector is held fixed under differentiation."""
    disc = disc or Discretization(problem)
    return rayleigh_quotient(disc, tables, state.c)


# --- metrics -------------------------------------------------------------------------


def _sqrt0(x) -> float:
    return float(np.sqrt(max(float(x), 0.0)))


def _fast_norm(a: CP, w) -> float:
    return _sqrt0(norm2(a, w))


def _energy_error(disc: Discretization, grads: List[CP], diff: CP, nrm=stable_norm) -> float:
    A = disc.A
    w = disc.w
    if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
        e = sum(A[s, s] * nrm(grads[s], w) ** 2 for s in range(len(grads)))
    else:
        # ||A^{1/2} grad e||^2 = sum_s ||sum_t L_ts d_t e||^2 with A = L L^T
        L = np.linalg.cholesky(A)
        e = sum(nrm(concat(*[float(L[t, s]) * grads[t] for t in range(len(grads))
                                     if L[t, s] != 0.0]), w) ** 2 for s in range(len(grads)))
    if disc.b_const is not None:
        e += disc.b_const * nrm(diff, w) ** 2
    elif disc.b is not None:
        e += float(inner(disc.b_times(diff), diff, w))
    return _sqrt0(e)


def solution_metrics(disc: Discretization, tables: EvalTables, c, lam=None,
                     lift: Optional[Lift] = None, precise: bool = True) -> Dict[str, float]:
    """Relative errors of u_p against the exact solution (empty dict without one).

    With ``precise`` the error norms go through ``stable_norm`` and resolve
    values far below the sqrt(eps) floor of expanded squares; otherwise the
    cheaper expanded form is used.
    """
    nrm = stable_norm if precise else _fast_norm
    if disc.exact is None:
        return {}
    T = tables.detach()
    ex = disc.exact
    w = disc.w
    d = disc.layout.d
    c = torch.as_tensor(np.asarray(c), dtype=DTYPE)
    out = {}
    with torch.no_grad():
        if disc.problem.kind == "eigen":
            # distances to the L2 and H1-seminorm projections of u onto span(u_p)
            psi = _psi(T, c)
            uu, pp, up = (float(v) for v in (norm2(ex.value, w), norm2(psi, w), inner(ex.value, psi, w)))
            out["e_l2"] = nrm(concat((1.0 / math.sqrt(uu)) * ex.value,
                                             (-up / (math.sqrt(uu) * pp)) * psi), w)
            dus = [ex.partial(s) for s in range(d)]
            dps = [_partial(T, c, s) for s in range(d)]
            gu = float(sum(norm2(du, w) for du in dus))
            gp = float(sum(norm2(dp, w) for dp in dps))
            gup = float(sum(inner(du, dp, w) for du, dp in zip(dus, dps)))
            a, b = 1.0 / math.sqrt(gu), -gup / (math.sqrt(gu) * gp)
            out["e_h1"] = math.sqrt(sum(nrm(concat(a * du, b * dp), w) ** 2
                                        for du, dp in zip(dus, dps)))
            lam_ex = disc.problem.exact_lambda
            if lam_ex is not None and lam is not None:
                out["e_lambda"] = abs(lam - lam_ex) / abs(lam_ex)
            return out
        parts = [ex.value, -_psi(T, c)]
        if lift is not None:
            parts.append(-_psi(lift.tables, lift.c))
        diff = concat(*parts)
        grads = []
        for s in range(d):
            gs = [ex.partial(s), -_partial(T, c, s)]
            if lift is not None:
                gs.append(-_partial(lift.tables, lift.c, s))
            grads.append(concat(*gs))
        out["e_l2"] = nrm(diff, w) / disc.f_norm
        out["e_h1"] = math.sqrt(sum(nrm(g, w) ** 2 for g in grads)) / disc.f_norm
        out["energy_error"] = _energy_error(disc, grads, diff, nrm)
    return out


def boundary_error(disc: Discretization, tables: EvalTables, c) -> float:
    """||Psi_1 - g|| on the boundary relative to ||g|| (absolute when g = 0)."""
    T = tables.detach()
    psi = _psi(T, torch.as_tensor(np.asarray(c), dtype=DTYPE))
    L = disc.layout
    q = sum(stable_norm(psi - disc.g[fc], L.face_weights(*fc)) ** 2 for fc in L.faces())
    return math.sqrt(q) / disc.g_norm if disc.g_norm > 0 else math.sqrt(q)


# --- training ------------------------------------------------------------------------


@dataclass
class Phase:
    name: str
    objective: str  # "estimator", "boundary" or "rayleigh"
    optimizer: str  # "adam" or "lbfgs"
    epochs: int
    lr: float
    state: str = "u"


def phases_for(problem: ProblemSpec) -> List[Phase]:
    s = problem.schedule
    out = []
    if problem.kind == "nonhomo-dirichlet":
        out += [Phase("boundary-adam", "boundary", "adam", s.boundary_adam_epochs, s.adam_lr, "lift"),
                Phase("boundary-lbfgs", "boundary", "lbfgs", s.boundary_lbfgs_epochs, s.lbfgs_lr, "lift")]
    if problem.kind == "eigen":
        out.append(Phase("pretrain", "rayleigh", "adam", s.pretrain_epochs, s.pretrain_lr))
    out += [Phase("adam", "estimator", "adam", s.adam_epochs, s.adam_lr),
            Phase("lbfgs", "estimator", "lbfgs", s.lbfgs_epochs, s.lbfgs_lr)]
    return out


def initial_states(problem: ProblemSpec, seed: int = 0) -> Dict[str, TnnState]:
    rng = np.random.default_rng(seed)
    s = problem.schedule
    states = {}
    if problem.kind == "nonhomo-dirichlet":
        states["lift"] = init(problem.d, s.p, s.hidden, problem.domain, rng, mask=False)
    # Neumann solutions are free on the boundary; every other kind vanishes there
    mask = problem.kind != "neumann"
    states["u"] = init(problem.d, s.p, s.hidden, problem.domain, rng, mask=mask)
    return states


@dataclass
class TrainReport:
    records: List[dict] = field(default_factory=list)
    final: Dict[str, float] = field(default_factory=dict)
    jitter_events: List[Tuple[int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"
    error: Optional[str] = None
    states: Dict[str, TnnState] = field(default_factory=dict, repr=False)


@dataclass
class Evaluation:
    loss: float
    grad: Optional[np.ndarray]
    coef: Coefficients
    tables: EvalTables


class Trainer:
    """Runs the phase sequence for one problem; owns the network states."""

    def __init__(self, problem: ProblemSpec, states: Dict[str, TnnState],
                 disc: Optional[Discretization] = None, coef_grad: str = "implicit"):
        if coef_grad not in ("implicit", "fixed"):
            raise ValueError("coef_grad must be 'implicit' or 'fixed'")
        self.coef_grad = coef_grad
        self.problem = problem
        self.disc = disc or Discretization(problem)
        self.states = states
        self.phases = phases_for(problem)
        self._lift: Optional[Lift] = None
        self._e_bd: Optional[float] = None

    # lift handling for the two-network scheme
    def lift(self) -> Optional[Lift]:
        if "lift" not in self.states:
            return None
        if self._lift is None:
            st = self.states["lift"]
            T = eval_tables(st, self.disc.layout)
            coef = boundary_coefficients(self.disc, T)
            st.c = coef.c
            self._lift = Lift(T, torch.as_tensor(coef.c, dtype=DTYPE))
            self._e_bd = boundary_error(self.disc, T, coef.c)
        return self._lift

    def evaluate(self, phase: Phase, theta: np.ndarray, need_grad: bool = True,
                 fixed: Optional[Coefficients] = None) -> Evaluation:
        st = self.states[phase.state]
        if need_grad:
            th = torch.tensor(np.asarray(theta).reshape(st.theta.shape), dtype=DTYPE,
                              requires_grad=True)
            tables = eval_tables(st, self.disc.layout, th)
        else:
            tables = eval_tables(_with_theta(st, theta), self.disc.layout)
        lift = self.lift() if phase.objective == "estimator" else None
        coef = fixed if fixed is not None else solve_coefficients(
            self.disc, tables, phase.objective, lift)
        c, lam = torch.as_tensor(coef.c, dtype=DTYPE), coef.lam
        ctx = torch.enable_grad() if need_grad else torch.no_grad()
        with ctx:
            if need_grad and fixed is None and self.coef_grad == "implicit" \
                    and phase.objective != "rayleigh":
                c, lam_t = attach_coefficients(self.disc, tables, coef, phase.objective, lift)
                lam = lam if lam_t is None else lam_t
            if phase.objective == "boundary":
                loss = _root(boundary_fit_q(self.disc, tables, c))
            elif phase.objective == "rayleigh":
                loss = rayleigh_quotient(self.disc, tables, c)
            else:
                loss = _root(estimator_loss_q(self.disc, tables, c, lam, lift))
        if not torch.isfinite(loss):
            raise NumericalError(f"loss is not finite ({loss.item()})")
        grad = backward(loss, [th]) if need_grad else None
        return Evaluation(float(loss.detach()), grad, coef, tables.detach())

    def metrics(self, phase: Phase, ev: Evaluation, precise: bool = False) -> Dict[str, float]:
        if phase.objective == "boundary":
            return {"e_bd": boundary_error(self.disc, ev.tables, ev.coef.c)}
        out = solution_metrics(self.disc, ev.tables, ev.coef.c, ev.coef.lam, self.lift(), precise)
        if self.problem.kind == "eigen" and "e_lambda" not in out and ev.coef.lam is not None \
                and self.problem.exact_lambda is not None:
            out["e_lambda"] = abs(ev.coef.lam - self.problem.exact_lambda) / abs(self.problem.exact_lambda)
        if self._e_bd is not None:
            out["e_bd"] = self._e_bd
        return out

    def final_evaluation(self) -> Tuple[Evaluation, Dict[str, float]]:
        """Re-solve at the current parameters; loss and metrics use the stable norms."""
        phase = self.phases[-1]
        st = self.states[phase.state]
        ev = self.evaluate(phase, st.theta.reshape(-1), need_grad=False)
        st.c = ev.coef.c
        q = estimator_q_stable(self.disc, ev.tables, ev.coef.c, ev.coef.lam, self.lift())
        ev.loss = math.sqrt(max(q, LOSS_FLOOR))
        out = {"loss": ev.loss}
        out.update(self.metrics(phase, ev, precise=True))
        if ev.coef.lam is not None:
            out["lambda"] = ev.coef.lam
        return ev, out

    def run(self, on_record: Optional[Callable[[dict], None]] = None,
            on_checkpoint: Optional[Callable[[dict], None]] = None,
            resume: Optional[dict] = None, checkpoint_every: Optional[int] = None) -> TrainReport:
        report = TrainReport()
        every = checkpoint_every or self.problem.schedule.checkpoint_every
        t_start = time.perf_counter()
        start_phase, start_k, opt_state = 0, 0, None
        if resume is not None:
            start_phase, start_k = resume["phase_index"], resume["phase_epoch"]
            opt_state = resume.get("optimizer")
        epoch = sum(p.epochs for p in self.phases[:start_phase]) + start_k

        def emit(rec):
            rec["elapsed_s"] = time.perf_counter() - t_start
            report.records.append(rec)
            if on_record:
                on_record(rec)

        def checkpoint(pi, k, opt):
            if on_checkpoint:
                on_checkpoint({"phase_index": pi, "phase_epoch": k, "epoch": epoch,
                               "optimizer": _opt_to_dict(opt),
                               "states": {n: s.copy() for n, s in self.states.items()}})

        try:
            for pi in range(start_phase, len(self.phases)):
                phase = self.phases[pi]
                st = self.states[phase.state]
                if phase.objective == "estimator":
                    self.lift()
                k0 = start_k if pi == start_phase else 0
                opt = _opt_from_dict(opt_state, phase, st) if (pi == start_phase and opt_state) \
                    else _fresh_opt(phase, st)
                for k in range(k0, phase.epochs):
                    resumed_here = resume is not None and pi == start_phase and k == k0
                    if (k == 0 or epoch % every == 0) and not resumed_here:
                        checkpoint(pi, k, opt)
                    theta = st.theta.reshape(-1)
                    if phase.optimizer == "adam":
                        ev = self.evaluate(phase, theta)
                        new = adam_step(opt, theta, ev.grad, phase.lr)
                    else:
                        ev = self.evaluate(phase, theta)
                        fixed = ev.coef
                        new = lbfgs_step(opt, theta, _closure(self, phase, fixed, ev), phase.lr)
                    st.c = ev.coef.c
                    if ev.coef.jitter:
                        report.jitter_events.append((epoch, ev.coef.jitter))
                    rec = {"epoch": epoch, "phase": phase.name, "loss": ev.loss}
                    rec.update(self.metrics(phase, ev))
                    if ev.coef.lam is not None:
                        rec["lambda"] = ev.coef.lam
                    emit(rec)
                    st.theta = new.reshape(st.theta.shape)
                    epoch += 1
            rec = {"epoch": epoch, "phase": "final"}
            rec.update(self.final_evaluation()[1])
            emit(rec)
            report.final = {k: v for k, v in rec.items() if k not in ("phase", "elapsed_s")}
            checkpoint(len(self.phases), 0, None)
        except (DegenerateBasisError, NumericalError) as exc:
            report.status = "failed"
            report.error = f"{type(exc).__name__}: {exc}"
            log.error("training aborted at epoch %d: %s", epoch, report.error)
        report.wall_time = time.perf_counter() - t_start
        report.states = self.states
        return report


def _with_theta(st: TnnState, theta) -> TnnState:
    s = st.copy()
    s.theta = np.asarray(theta, dtype=np.float64).reshape(st.theta.shape)
    return s


def _closure(trainer: Trainer, phase: Phase, fixed: Coefficients, first: Evaluation):
    start = None

    def fn(theta):
        nonlocal start
        if start is None:
            start = first
            return first.loss, first.grad
        ev = trainer.evaluate(phase, theta, fixed=fixed if trainer.coef_grad == "fixed" else None)
        return ev.loss, ev.grad

    return fn


def _fresh_opt(phase: Phase, st: TnnState):
    if phase.optimizer == "adam":
        return AdamState.zeros(st.theta.size)
    return LbfgsState()


def _opt_to_dict(opt) -> Optional[dict]:
    if opt is None:
        return None
    if isinstance(opt, AdamState):
        return {"kind": "adam", "t": opt.t, "m": opt.m.copy(), "v": opt.v.copy()}
    return {"kind": "lbfgs", "steepest": opt.steepest,
            "s": [s.copy() for s in opt.s], "y": [y.copy() for y in opt.y]}


def _opt_from_dict(data: dict, phase: Phase, st: TnnState):
    if data is None:
        return _fresh_opt(phase, st)
    if data["kind"] != phase.optimizer:
        raise ValueError("checkpoint optimizer does not match the phase being resumed")
    if data["kind"] == "adam":
        return AdamState(np.asarray(data["m"], float), np.asarray(data["v"], float), int(data["t"]))
    opt = LbfgsState()
    opt.s = [np.asarray(s, float) for s in data["s"]]
    opt.y = [np.asarray(y, float) for y in data["y"]]
    opt.steepest = bool(data["steepest"])
    return opt


def train(problem: ProblemSpec, states: Optional[Dict[str, TnnState]] = None, seed: int = 0,
          on_record=None, on_checkpoint=None, resume: Optional[dict] = None,
          coef_grad: str = "implicit", checkpoint_every: Optional[int] = None) -> TrainReport:
    """Run every phase of ``problem.schedule`` and return the epoch log.

    With ``resume`` (a loaded checkpoint) the states and optimizer memory come
    from the checkpoint and training continues from its epoch.
    """
    problem.validate()
    if resume is not None:
        states = {k: v.copy() for k, v in resume["states"].items()}
    elif states is None:
        states = initial_states(problem, seed)
    return Trainer(problem, states, coef_grad=coef_grad).run(
        on_record, on_checkpoint, resume, checkpoint_every)


def compute_metrics(states: Dict[str, TnnState], problem: ProblemSpec,
                    disc: Optional[Discretization] = None) -> Dict[str, float]:
    """Errors of the current states against the exact solution (coefficients re-solved)."""
    return Trainer(problem, states, disc).final_evaluation()[1]
