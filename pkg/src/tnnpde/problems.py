"""Problem descriptions and the registry of benchmark examples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .expr import SeparableFn
from .quadrature import QuadGrid, composite_grid, gauss_hermite

KINDS = ("homo-dirichlet", "nonhomo-dirichlet", "neumann", "eigen")
DIMENSIONS = (2, 5, 10, 20)
LINE_CHECK = (-10.0, 10.0)  # sampling window for validating whole-line factors

Face = Tuple[int, str]


class ValidationError(ValueError):
    pass


@dataclass
class GridSpec:
    """Composite Gauss-Legendre (n_sub panels of n_pts) or an n_pts Hermite rule."""

    n_sub: int = 10
    n_pts: int = 16
    hermite: bool = False

    def build(self, domain) -> List[QuadGrid]:
        if self.hermite:
            return [gauss_hermite(self.n_pts) for _ in domain]
        return [composite_grid(iv, self.n_sub, self.n_pts) for iv in domain]


@dataclass
class Schedule:
    p: int = 20
    hidden: Tuple[int, ...] = (50, 50, 50)
    adam_epochs: int = 1000
    adam_lr: float = 0.003
    lbfgs_epochs: int = 100
    lbfgs_lr: float = 1.0
    pretrain_epochs: int = 0
    pretrain_lr: float = 0.003
    boundary_adam_epochs: int = 0
    boundary_lbfgs_epochs: int = 0
    checkpoint_every: int = 1000

    def validate(self):
        if self.p < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValidationError("schedule: p and hidden widths must be positive")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.endswith("_epochs") and (not isinstance(v, int) or v < 0):
                raise ValidationError(f"schedule.{f.name} must be a non-negative integer")
            if f.name.endswith("_lr") and not (isinstance(v, (int, float)) and v >= 0 and math.isfinite(v)):
                raise ValidationError(f"schedule.{f.name} must be a finite non-negative number")
        if self.checkpoint_every < 1:
            raise ValidationError("schedule.checkpoint_every must be positive")


@dataclass
class ProblemSpec:
    """Operator -div(A grad u) + b u with source, boundary data and optional exact solution.

    ``g`` is the Dirichlet trace (nonhomo-dirichlet) or the normal flux
    (neumann), either one SeparableFn for every face or a per-face mapping.
    """

    name: str
    kind: str
    domain: List[Optional[Tuple[float, float]]]
    A: np.ndarray
    b: Union[None, float, SeparableFn] = None
    f: Optional[SeparableFn] = None
    g: Union[None, SeparableFn, Dict[Face, SeparableFn]] = None
    exact_u: Optional[SeparableFn] = None
    exact_lambda: Optional[float] = None
    grid: GridSpec = field(default_factory=GridSpec)
    schedule: Schedule = field(default_factory=Schedule)

    @property
    def d(self) -> int:
        return len(self.domain)

    @property
    def bounded(self) -> bool:
        return self.domain[0] is not None

    @property
    def b_is_zero(self) -> bool:
        return self.b is None or (isinstance(self.b, (int, float)) and self.b == 0.0)

    def faces(self):
        for i in range(self.d):
            for side in ("a", "b"):
                yield i, side

    def face_data(self) -> Dict[Face, SeparableFn]:
        if isinstance(self.g, SeparableFn):
            return {face: self.g for face in self.faces()}
        return dict(self.g)

    def validate(self) -> "ProblemSpec":
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        d = self.d
        if d < 1:
            raise ValidationError("domain must have at least one dimension")
        if len({iv is None for iv in self.domain}) != 1:
            raise ValidationError("mixing bounded and whole-line dimensions is not supported")
        for iv in self.domain:
            if iv is not None and not iv[0] < iv[1]:
                raise ValidationError(f"interval {iv} must satisfy a < b")
        A = np.asarray(self.A, dtype=np.float64)
        if A.shape != (d, d) or not np.allclose(A, A.T, rtol=0, atol=1e-14):
            raise ValidationError("A must be a symmetric d x d matrix")
        if np.any(np.linalg.eigvalsh(A) <= 0):
            raise ValidationError("A must be positive definite")
        self.A = A
        if self.grid.hermite == self.bounded:
            raise ValidationError("Hermite grids go with whole-line domains, composite grids with intervals")
        if self.kind != "eigen" and self.f is None:
            raise ValidationError(f"{self.kind} problems need a source f")
        if self.kind in ("nonhomo-dirichlet", "neumann"):
            if self.g is None:
                raise ValidationError(f"{self.kind} problems need boundary data g")
            if not self.bounded:
                raise ValidationError("boundary data needs a bounded domain")
            data = self.face_data()
            missing = [face for face in self.faces() if face not in data]
            if missing:
                raise ValidationError(f"boundary data missing for faces {missing}")
        if self.kind == "neumann" and self.b_is_zero:
            raise ValidationError("neumann problems need a reaction term b > 0")
        if not self.bounded and self.b_is_zero:
            raise ValidationError("whole-line problems need a confining reaction term b")
        if isinstance(self.b, (int, float)) and self.b < 0:
            raise ValidationError("b must be non-negative")
        check = [iv if iv is not None else LINE_CHECK for iv in self.domain]
        for label, fn in self._functions():
            if fn.dim != d:
                raise ValidationError(f"{label} has dimension {fn.dim}, domain has {d}")
            try:
                fn.validate(check)
            except (ArithmeticError, ValueError) as exc:
                raise ValidationError(f"{label}: {exc}") from None
        self.schedule.validate()
        return self

    def _functions(self):
        for label in ("b", "f", "exact_u"):
            fn = getattr(self, label)
            if isinstance(fn, SeparableFn):
                yield label, fn
        if self.g is not None:
            for face, fn in self.face_data().items():
                yield f"g{face}", fn

    def with_schedule(self, **kw) -> "ProblemSpec":
        return replace(self, schedule=replace(self.schedule, **kw))


# --- registry -------------------------------------------------------------------


def poisson_homo(d: int) -> ProblemSpec:
    # -Lap u = f on (-1,1)^d with u = sum_k sin(2 pi x_k) prod_{i != k} sin(pi x_i)
    u = SeparableFn.sum_of_products("sin(2*pi*x)", "sin(pi*x)", d)
    f = SeparableFn.sum_of_products("sin(2*pi*x)", "sin(pi*x)", d, coef=(d + 3) * math.pi ** 2)
    return ProblemSpec(
        f"poisson-homo-d{d}", "homo-dirichlet", [(-1.0, 1.0)] * d, np.eye(d), None, f,
        exact_u=u, grid=GridSpec(200, 16),
        schedule=Schedule(p=50, hidden=(100, 100, 100), adam_epochs=50000, adam_lr=0.003,
                          lbfgs_epochs=10000, lbfgs_lr=1.0),
    )


def poisson_nonhomo(d: int) -> ProblemSpec:
    u = SeparableFn.sum("sin(pi/2*x)", d)
    f = SeparableFn.sum("sin(pi/2*x)", d, coef=math.pi ** 2 / 4)
    return ProblemSpec(
        f"poisson-nonhomo-d{d}", "nonhomo-dirichlet", [(0.0, 1.0)] * d, np.eye(d), None, f,
        g=u, exact_u=u, grid=GridSpec(10, 16),
        schedule=Schedule(p=20, hidden=(50, 50, 50), adam_epochs=20000, adam_lr=0.003,
                          lbfgs_epochs=5000, lbfgs_lr=0.1,
                          boundary_adam_epochs=20000, boundary_lbfgs_epochs=5000),
    )


def neumann(d: int) -> ProblemSpec:
    u = SeparableFn.sum("sin(pi*x)", d)
    f = SeparableFn.sum("sin(pi*x)", d, coef=2 * math.pi ** 2)
    g = {}
    for i in range(d):
        for side, expr in (("a", "-pi*cos(pi*x)"), ("b", "pi*cos(pi*x)")):
            factors = ["1"] * d
            factors[i] = expr
            g[(i, side)] = SeparableFn([factors])
    return ProblemSpec(
        f"neumann-d{d}", "neumann", [(0.0, 1.0)] * d, np.eye(d), math.pi ** 2, f, g=g,
        exact_u=u, grid=GridSpec(100, 16),
        schedule=Schedule(p=100, hidden=(100, 100, 100), adam_epochs=50000, adam_lr=0.003,
                          lbfgs_epochs=10000, lbfgs_lr=1.0),
    )


def laplace_eigen(d: int) -> ProblemSpec:
    return ProblemSpec(
        f"laplace-eigen-d{d}", "eigen", [(0.0, 1.0)] * d, np.eye(d), None,
        exact_u=SeparableFn.product("sin(pi*x)", d), exact_lambda=d * math.pi ** 2,
        grid=GridSpec(100, 16),
        schedule=Schedule(p=50, hidden=(100, 100, 100), pretrain_epochs=2000, pretrain_lr=0.003,
                          adam_epochs=50000, adam_lr=0.003, lbfgs_epochs=10000, lbfgs_lr=1.0),
    )


def harmonic(d: int) -> ProblemSpec:
    return ProblemSpec(
        f"harmonic-d{d}", "eigen", [None] * d, np.eye(d), SeparableFn.sum("x^2", d),
        exact_u=SeparableFn.product("exp(-x^2/2)", d), exact_lambda=float(d),
        grid=GridSpec(n_pts=200, hermite=True),
        schedule=Schedule(p=50, hidden=(100, 100, 100), pretrain_epochs=10000, pretrain_lr=0.01,
                          adam_epochs=0, lbfgs_epochs=10000, lbfgs_lr=1.0),
    )


# Reduced CPU schedules: same equations, smaller networks and budgets.
DESK = {
    "poisson-homo": dict(schedule=dict(p=20, hidden=(50, 50, 50), adam_epochs=5000, adam_lr=0.003,
                                       lbfgs_epochs=500, lbfgs_lr=1.0), grid=GridSpec(20, 16)),
    "poisson-nonhomo": dict(schedule=dict(p=20, hidden=(50, 50, 50), adam_epochs=3000,
                                          lbfgs_epochs=500, lbfgs_lr=0.1,
                                          boundary_adam_epochs=3000, boundary_lbfgs_epochs=500),
                            grid=GridSpec(10, 16)),
    "neumann": dict(schedule=dict(p=20, hidden=(50, 50, 50), adam_epochs=5000, adam_lr=0.003,
                                  lbfgs_epochs=500, lbfgs_lr=1.0), grid=GridSpec(20, 16)),
    "laplace-eigen": dict(schedule=dict(p=20, hidden=(50, 50, 50), pretrain_epochs=2000,
                                        adam_epochs=2000, lbfgs_epochs=500, lbfgs_lr=1.0),
                          grid=GridSpec(20, 16)),
    "harmonic": dict(schedule=dict(p=20, hidden=(50, 50, 50), pretrain_epochs=3000, pretrain_lr=0.01,
                                   adam_epochs=0, lbfgs_epochs=500, lbfgs_lr=1.0),
                     grid=GridSpec(n_pts=100, hermite=True)),
}

FAMILIES = {
    "poisson-homo": poisson_homo,
    "poisson-nonhomo": poisson_nonhomo,
    "neumann": neumann,
    "laplace-eigen": laplace_eigen,
    "harmonic": harmonic,
}


def _split(name: str):
    base, desk = (name[:-5], True) if name.endswith("-desk") else (name, False)
    family, _, dpart = base.rpartition("-d")
    if family not in FAMILIES or not dpart.isdigit():
        raise KeyError(name)
    return family, int(dpart), desk


def get_problem(name: str, desk: bool = False) -> ProblemSpec:
    """Registry lookup; a ``-desk`` suffix (or ``desk=True``) selects the reduced schedule."""
    try:
        family, d, suffix_desk = _split(name)
    except KeyError:
        raise ValidationError(f"unknown problem {name!r}; see `tnnpde list`") from None
    if d < 1:
        raise ValidationError("dimension must be positive")
    spec = FAMILIES[family](d)
    if desk or suffix_desk:
        over = DESK[family]
        spec = replace(spec, name=spec.name + "-desk", grid=over["grid"],
                       schedule=replace(spec.schedule, **over["schedule"]))
    return spec


def registry(desk: bool = False) -> List[str]:
    names = [f"{fam}-d{d}" for fam in FAMILIES for d in DIMENSIONS]
    return [n + "-desk" for n in names] if desk else names
