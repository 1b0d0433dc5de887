"""Fast self-checks behind ``tnnpde check``."""

from __future__ import annotations

import dataclasses
import itertools
import math
from typing import Iterator, Tuple

import numpy as np
import torch

from . import assembly as asm
from .autodiff import fd_check
from .expr import SeparableFn
from .problems import GridSpec, get_problem
from .quadrature import composite_grid, gauss_hermite, gauss_legendre
from .solver import Trainer, initial_states
from .tnn import Layout, eval_tables, init

Check = Tuple[str, bool, str]


def check_quadrature() -> Iterator[Check]:
    x, w = gauss_legendre(16)
    worst = max(abs(np.dot(w, x ** k) - (2.0 / (k + 1) if k % 2 == 0 else 0.0)) for k in range(32))
    yield "gauss-legendre n=16 monomials deg<=31", worst <= 1e-13, f"max abs error {worst:.2e}"
    g = gauss_hermite(200)
    worst = 0.0
    for m in range(6):
        exact = math.sqrt(math.pi) * math.prod(range(1, 2 * m, 2)) / 2 ** m
        got = np.dot(g.weights, g.nodes ** (2 * m) * np.exp(-g.nodes ** 2))
        worst = max(worst, abs(got - exact) / exact)
    yield "gauss-hermite n=200 moments m<=5", worst <= 1e-10, f"max rel error {worst:.2e}"


def full_grid_stiffness(tables, A, b_values=None):
    """Dense tensor-grid oracle for the stiffness and mass matrices (small d only)."""
    L = tables.layout
    n = L.n_nodes
    d = L.d
    V = tables.V.detach().numpy()[:, :n]
    D = tables.D1.detach().numpy()[:, :n]
    W = np.ones([n] * d)
    for i in range(d):
        W = W * L.weights[i, :n].reshape([n if j == i else 1 for j in range(d)])
    letters = "ijklm"[:d]

    def full(F):
        spec = ",".join(f"{letters[i]}z" for i in range(d)) + f"->{letters}z"
        return np.einsum(spec, *F)

    phi = full([V[i] for i in range(d)])
    grads = [full([D[i] if i == s else V[i] for i in range(d)]) for s in range(d)]
    S = sum(A[s, t] * np.einsum(f"{letters}m,{letters}n,{letters}->mn", grads[s], grads[t], W)
            for s in range(d) for t in range(d))
    if b_values is not None:
        S = S + np.einsum(f"{letters}m,{letters}n,{letters}->mn", phi, phi, W * b_values)
    M = np.einsum(f"{letters}m,{letters}n,{letters}->mn", phi, phi, W)
    return S, M, phi, W


def check_assembly() -> Iterator[Check]:
    for d in (2, 3):
        grids = [composite_grid((0.0, 1.0), 3, 6) for _ in range(d)]
        L = Layout.from_grids(grids)
        st = init(d, 4, (6, 6), [(0.0, 1.0)] * d, seed=d)
        T = eval_tables(st, L)
        rng = np.random.default_rng(d)
        G = rng.normal(size=(d, d))
        A = G @ G.T + d * np.eye(d)
        b = SeparableFn([["1+x^2"] * d, ["cos(x)"] * d], [1.0, 0.5])
        n = L.n_nodes
        mesh = np.meshgrid(*[L.rows[i, :n] for i in range(d)], indexing="ij")
        bvals = b(np.stack([m.ravel() for m in mesh], axis=1)).reshape([n] * d)
        S_ref, M_ref, phi, W = full_grid_stiffness(T, A, bvals)
        S = asm.assemble_stiffness(T, A, b)
        M = asm.assemble_mass(T)
        f = SeparableFn.product("sin(pi*x)", d)
        fvals = f(np.stack([m.ravel() for m in mesh], axis=1)).reshape([n] * d)
        letters = "ijklm"[:d]
        B_ref = np.einsum(f"{letters}m,{letters}->m", phi, W * fvals)
        B = asm.assemble_load(T, f)
        err = max(np.abs(S - S_ref).max() / np.abs(S_ref).max(),
                  np.abs(M - M_ref).max() / np.abs(M_ref).max(),
                  np.abs(B - B_ref).max() / np.abs(B_ref).max())
        yield f"separable assembly vs full grid d={d}", err <= 1e-11, f"max rel error {err:.2e}"


def check_gradients() -> Iterator[Check]:
    for name in ("poisson-homo-d2", "neumann-d2", "laplace-eigen-d2", "poisson-nonhomo-d2"):
        pb = get_problem(name).with_schedule(p=2, hidden=(4,))
        pb = dataclasses.replace(pb, grid=GridSpec(4, 8)).validate()
        states = initial_states(pb, 1)
        tr = Trainer(pb, states)
        worst = 0.0
        for ph in tr.phases:
            if ph.epochs == 0:
                continue
            theta = states[ph.state].theta.reshape(-1)
            res = fd_check(lambda th: (lambda e: (e.loss, e.grad))(tr.evaluate(ph, th)), theta, 1e-4)
            worst = max(worst, res["max"])
        yield f"reverse-mode vs finite differences ({name})", worst <= 1e-5, f"max rel error {worst:.2e}"


def run_checks():
    torch.set_num_threads(1)
    for gen in (check_quadrature, check_assembly, check_gradients):
        yield from gen()
