"""Tiny 1-D expression language for separable problem data.

Grammar (precedence high to low)::

    atom   := number | 'pi' | 'x' | func '(' expr ')' | '(' expr ')'
    power  := atom ('^' ['-'] integer)*
    unary  := '-' unary | power
    term   := unary (('*' | '/') unary)*
    expr   := term (('+' | '-') term)*

with ``func`` one of sin, cos, exp, sqrt.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "sqrt")

VALIDATION_SAMPLES = 1000


class ExprSyntaxError(ValueError):
    def __init__(self, msg, text, pos):
        super().__init__(f"{msg} at position {pos} in {text!r}")
        self.pos = pos


class DomainError(ArithmeticError):
    """Non-finite value of an expression at a sample point."""

    def __init__(self, expr, point):
        super().__init__(f"{expr} is not finite at x={point!r}")
        self.point = point


# --- AST -------------------------------------------------------------------


class Expr:
    def __call__(self, x):
        return eval_batch(self, x)

    def __str__(self):
        return to_string(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Pi(Expr):
    pass


@dataclass(frozen=True)
class X(Expr):
    pass


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Func(Expr):
    name: str
    arg: Expr


# --- parsing ----------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.take()
        if val != value:
            raise ExprSyntaxError(f"expected {value!r}, found {val or 'end'!r}", self.text, pos)

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {val!r}", self.text, pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        node = self.atom()
        while self.peek()[1] == "^":
            self.take()
            sign = 1
            if self.peek()[1] == "-":
                self.take()
                sign = -1
            kind, val, pos = self.take()
            if kind != "num" or not re.fullmatch(r"\d+", val):
                raise ExprSyntaxError("exponent must be an integer literal", self.text, pos)
            node = Pow(node, sign * int(val))
        return node

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if val == "pi":
                return Pi()
            if val == "x":
                return X()
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Func(val, arg)
            raise ExprSyntaxError(f"unknown identifier {val!r}", self.text, pos)
        if val == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExprSyntaxError(f"unexpected {val or 'end of input'!r}", self.text, pos)


def parse(text: str) -> Expr:
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", str(text), 0)
    return _Parser(text).parse()


def as_expr(e: Union[str, float, int, Expr]) -> Expr:
    if isinstance(e, Expr):
        return e
    if isinstance(e, (int, float)):
        return Num(float(e)) if e >= 0 else Neg(Num(-float(e)))
    return parse(e)


# --- printing ---------------------------------------------------------------

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_string(e: Expr) -> str:
    if isinstance(e, Num):
        s = _fmt_num(e.value)
        return f"({s})" if e.value < 0 else s
    if isinstance(e, Pi):
        return "pi"
    if isinstance(e, X):
        return "x"
    if isinstance(e, Func):
        return f"{e.name}({to_string(e.arg)})"
    if isinstance(e, Neg):
        inner = to_string(e.arg)
        if _PREC.get(type(e.arg), 5) < _PREC[Neg]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Pow):
        base = to_string(e.base)
        if _PREC.get(type(e.base), 5) <= _PREC[Pow]:
            base = f"({base})"
        return f"{base}^{e.exponent}"
    prec = _PREC[type(e)]
    op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
    left = to_string(e.left)
    right = to_string(e.right)
    if _PREC.get(type(e.left), 5) < prec:
        left = f"({left})"
    # left associativity: equal precedence on the right needs parentheses
    if _PREC.get(type(e.right), 5) <= prec:
        right = f"({right})"
    return f"{left} {op} {right}"


# --- evaluation -------------------------------------------------------------


def _eval(e: Expr, x: np.ndarray) -> np.ndarray:
    if isinstance(e, Num):
        return np.full_like(x, e.value)
    if isinstance(e, Pi):
        return np.full_like(x, math.pi)
    if isinstance(e, X):
        return x
    if isinstance(e, Neg):
        return -_eval(e.arg, x)
    if isinstance(e, Add):
        return _eval(e.left, x) + _eval(e.right, x)
    if isinstance(e, Sub):
        return _eval(e.left, x) - _eval(e.right, x)
    if isinstance(e, Mul):
        return _eval(e.left, x) * _eval(e.right, x)
    if isinstance(e, Div):
        return _eval(e.left, x) / _eval(e.right, x)
    if isinstance(e, Pow):
        base = _eval(e.base, x)
        if e.exponent < 0:
            return 1.0 / base ** (-e.exponent)
        return base ** e.exponent
    if isinstance(e, Func):
        return getattr(np, e.name)(_eval(e.arg, x))
    raise TypeError(f"not an expression node: {e!r}")


def eval_batch(e: Expr, points) -> np.ndarray:
    """Evaluate ``e`` pointwise; any non-finite value raises DomainError."""
    x = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("evaluation points must be finite")
    with np.errstate(all="ignore"):
        out = _eval(e, x)
    out = np.broadcast_to(out, x.shape).astype(np.float64)
    bad = ~np.isfinite(out)
    if np.any(bad):
        raise DomainError(to_string(e), float(np.ravel(x)[np.argmax(np.ravel(bad))]))
    return out


def validate(e: Expr, interval: Tuple[float, float], extra_points=None) -> None:
    """Sample ``e`` on a uniform grid of the interval (plus optional points)."""
    a, b = interval
    pts = np.linspace(a, b, VALIDATION_SAMPLES)
    if extra_points is not None:
        pts = np.concatenate([pts, np.asarray(extra_points, dtype=np.float64)])
    eval_batch(e, pts)


# --- differentiation --------------------------------------------------------


def _is_num(e, v=None):
    return isinstance(e, Num) and (v is None or e.value == v)


def _add(a, b):
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    return Add(a, b)


def _sub(a, b):
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return _neg(b)
    return Sub(a, b)


def _neg(a):
    if _is_num(a, 0.0):
        return a
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _mul(a, b):
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if isinstance(a, Neg):
        return _neg(_mul(a.arg, b))
    if isinstance(b, Neg):
        return _neg(_mul(a, b.arg))
    return Mul(a, b)


def _div(a, b):
    if _is_num(a, 0.0):
        return a
    if _is_num(b, 1.0):
        return a
    return Div(a, b)


def _pow(a, n):
    if n == 0:
        return Num(1.0)
    if n == 1:
        return a
    return Pow(a, n)


def deriv(e: Expr) -> Expr:
    """Symbolic d/dx with light constant folding."""
    if isinstance(e, (Num, Pi)):
        return Num(0.0)
    if isinstance(e, X):
        return Num(1.0)
    if isinstance(e, Neg):
        return _neg(deriv(e.arg))
    if isinstance(e, Add):
        return _add(deriv(e.left), deriv(e.right))
    if isinstance(e, Sub):
        return _sub(deriv(e.left), deriv(e.right))
    if isinstance(e, Mul):
        return _add(_mul(deriv(e.left), e.right), _mul(e.left, deriv(e.right)))
    if isinstance(e, Div):
        num = _sub(_mul(deriv(e.left), e.right), _mul(e.left, deriv(e.right)))
        return _div(num, _pow(e.right, 2))
    if isinstance(e, Pow):
        n = e.exponent
        if n == 0:
            return Num(0.0)
        coef = Num(float(n)) if n > 0 else None
        inner = _mul(_pow(e.base, n - 1), deriv(e.base))
        return _mul(coef, inner) if coef is not None else _neg(_mul(Num(float(-n)), inner))
    if isinstance(e, Func):
        du = deriv(e.arg)
        if e.name == "sin":
            outer = Func("cos", e.arg)
        elif e.name == "cos":
            outer = _neg(Func("sin", e.arg))
        elif e.name == "exp":
            outer = e
        else:  # sqrt
            outer = Div(Num(1.0), Mul(Num(2.0), e))
        return _mul(outer, du)
    raise TypeError(f"not an expression node: {e!r}")


# --- separable functions ----------------------------------------------------


class SeparableFn:
    """Rank-q separable function ``sum_k coef_k prod_i f_{i,k}(x_i)``.

    ``factors[k][i]`` is the expression for dimension i of term k.
    """

    def __init__(self, factors: Sequence[Sequence], coefs: Optional[Sequence[float]] = None):
        self.factors: Tuple[Tuple[Expr, ...], ...] = tuple(
            tuple(as_expr(f) for f in term) for term in factors
        )
        if not self.factors:
            raise ValueError("a separable function needs at least one term")
        dims = {len(t) for t in self.factors}
        if len(dims) != 1:
            raise ValueError("every term must have one factor per dimension")
        self.dim = dims.pop()
        self.coefs = np.ones(len(self.factors)) if coefs is None else np.asarray(coefs, float)
        if self.coefs.shape != (len(self.factors),):
            raise ValueError("coefs must have one entry per term")
        self._derivs: Dict[Tuple[int, int], Expr] = {}

    @property
    def rank(self) -> int:
        return len(self.factors)

    @classmethod
    def constant(cls, value: float, dim: int) -> "SeparableFn":
        return cls([["1"] * dim], [value])

    @classmethod
    def product(cls, factor, dim: int, coef: float = 1.0) -> "SeparableFn":
        """``coef * prod_i factor(x_i)``."""
        return cls([[factor] * dim], [coef])

    @classmethod
    def sum(cls, factor, dim: int, coef: float = 1.0) -> "SeparableFn":
        """``coef * sum_k factor(x_k)``."""
        terms = [["1"] * dim for _ in range(dim)]
        for k in range(dim):
            terms[k][k] = factor
        return cls(terms, [coef] * dim)

    @classmethod
    def sum_of_products(cls, special, other, dim: int, coef: float = 1.0) -> "SeparableFn":
        """``coef * sum_k special(x_k) prod_{i != k} other(x_i)``."""
        terms = [[other] * dim for _ in range(dim)]
        for k in range(dim):
            terms[k][k] = special
        return cls(terms, [coef] * dim)

    def factor_deriv(self, k: int, i: int) -> Expr:
        key = (k, i)
        if key not in self._derivs:
            self._derivs[key] = deriv(self.factors[k][i])
        return self._derivs[key]

    def factor_values(self, i: int, points, derivative: bool = False) -> np.ndarray:
        """Matrix (len(points), rank) of dimension-i factor values."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty((pts.size, self.rank))
        cache: Dict[Expr, np.ndarray] = {}
        for k in range(self.rank):
            e = self.factor_deriv(k, i) if derivative else self.factors[k][i]
            if e not in cache:
                cache[e] = eval_batch(e, pts)
            out[:, k] = cache[e]
        return out

    def __call__(self, x) -> np.ndarray:
        """Evaluate at points of shape (n, d) or (d,)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValueError(f"expected points with {self.dim} coordinates")
        total = np.zeros(x.shape[0])
        for k in range(self.rank):
            term = np.full(x.shape[0], self.coefs[k])
            for i in range(self.dim):
                term = term * eval_batch(self.factors[k][i], x[:, i])
            total += term
        return total[0] if single else total

    def validate(self, intervals: Sequence[Tuple[float, float]], extra_points=None) -> None:
        for i, iv in enumerate(intervals):
            extra = None if extra_points is None else extra_points[i]
            for e in {t[i] for t in self.factors}:
                validate(e, iv, extra)

    def to_config(self) -> dict:
        return {
            "terms": [[to_string(f) for f in t] for t in self.factors],
            "coefs": [float(c) for c in self.coefs],
        }

    def __repr__(self):
        return f"SeparableFn(dim={self.dim}, rank={self.rank})"
