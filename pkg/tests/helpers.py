"""Shared fixtures for building hand-crafted bases and small problems."""

import math

import numpy as np

from tnnpde.expr import SeparableFn
from tnnpde.problems import GridSpec, ProblemSpec, Schedule
from tnnpde.tnn import eval_tables, init


def sine_state(d, modes, interval=(0.0, 1.0)):
    """Unmasked state whose column j is prod_i sin(modes[j] * pi * (x_i - a) / (b - a))."""
    p = len(modes)
    a, b = interval
    st = init(d, p, (p,), [interval] * d, seed=0, mask=False)
    W0 = np.array(modes, float) * math.pi / (b - a)
    st.theta[:] = np.concatenate([W0, -W0 * a, np.eye(p).ravel(), np.zeros(p)])
    return st


def sine_tables(d, modes, layout):
    return eval_tables(sine_state(d, modes), layout)


def small_schedule(**kw):
    base = dict(p=4, hidden=(8,), adam_epochs=0, lbfgs_epochs=0)
    base.update(kw)
    return Schedule(**base)


def sine_poisson(d=2, b=None, modes=(1, 1), grid=GridSpec(4, 12), **sched):
    """-Lap u + b u = f on the unit cube with u = prod_i sin(modes[i] pi x_i)."""
    factors = [f"sin({m}*pi*x)" for m in modes[:d]]
    u = SeparableFn([factors])
    coef = math.pi ** 2 * sum(m * m for m in modes[:d]) + (b or 0.0)
    return ProblemSpec("sine-poisson", "homo-dirichlet", [(0.0, 1.0)] * d, np.eye(d), b,
                       SeparableFn([factors], [coef]), exact_u=u, grid=grid,
                       schedule=small_schedule(**sched)).validate()


def sine_eigen(d=2, grid=GridSpec(4, 12), **sched):
    return ProblemSpec("sine-eigen", "eigen", [(0.0, 1.0)] * d, np.eye(d),
                       exact_u=SeparableFn.product("sin(pi*x)", d), exact_lambda=d * math.pi ** 2,
                       grid=grid, schedule=small_schedule(**sched)).validate()
