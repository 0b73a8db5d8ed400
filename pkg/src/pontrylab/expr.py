"""Expression trees for dynamics, state constraints and endpoint functions.

Problems are defined by small closed-form expressions over the time variable
``t``, states ``x1..xn`` and controls ``u1..um``.  This module provides

* a total recursive-descent parser for the grammar (precedence
  ``^`` > unary ``-`` > ``* /`` > ``+ -``, left-associative except ``^``
  which is right-associative),
* exact evaluation with hard domain errors (``log``/``sqrt``/division never
  silently produce NaN),
* exact first derivatives by forward-mode dual-number propagation,
* second derivatives by central finite differences of the analytic gradient.

Evaluation is numpy-aware: the point arguments may be scalars or broadcastable
arrays, in which case whole batches of points are evaluated in one tree walk.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Expr", "Num", "Const", "Var", "Neg", "Bin", "Call", "Piecewise",
    "ExprSyntaxError", "UnboundVariableError", "DomainError",
    "NondifferentiableError",
    "parse_expr", "to_source", "evaluate", "grad", "hessian", "free_vars",
]

_FUNCTIONS_1 = ("sin", "cos", "exp", "log", "sqrt", "abs")
_FUNCTIONS_2 = ("max2", "min2")
_FUNCTIONS = _FUNCTIONS_1 + _FUNCTIONS_2


class ExprSyntaxError(ValueError):
    """Malformed source text; ``offset`` is the byte offset of the error."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnboundVariableError(ExprSyntaxError):
    """Variable index outside the declared state/control dimensions."""


class DomainError(ArithmeticError):
    """Evaluation left the domain of log/sqrt/division/power."""


class NondifferentiableError(ArithmeticError):
    """Derivative requested at a kink of ``abs``/``max2``/``min2``.

    ``interval`` holds the interval of admissible directional derivatives
    (the subgradient interval along the seeded direction).
    """

    def __init__(self, message, interval):
        super().__init__(f"{message}; subgradient interval {interval}")
        self.interval = interval


class Expr:
    """Base class of all AST nodes.  Nodes are immutable and hashable."""

    __slots__ = ()


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Const(Expr):
    name: str  # only "pi"


@dataclass(frozen=True)
class Var(Expr):
    kind: str  # "t", "x" or "u"
    index: int  # 1-based for x/u, 0 for t


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Bin(Expr):
    op: str  # + - * / ^
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    args: tuple


@dataclass(frozen=True)
class Piecewise(Expr):
    """Time-switched expression: ``parts[i]`` applies on [breaks[i-1], breaks[i]).

    Constructed programmatically (by the time-reparameterization transform);
    not part of the surface grammar and not serializable to source text.
    """

    breaks: tuple  # interior breakpoints, strictly increasing
    parts: tuple   # len(parts) == len(breaks) + 1


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, source, n, m):
        self.src = source
        self.n = n
        self.m = m
        self.pos = 0

    def error(self, message, offset=None):
        raise ExprSyntaxError(message, self.pos if offset is None else offset)

    def skip_ws(self):
        while self.pos < len(self.src) and self.src[self.pos].isspace():
            self.pos += 1

    def peek(self):
        self.skip_ws()
        return self.src[self.pos] if self.pos < len(self.src) else ""

    def expect(self, ch):
        if self.peek() != ch:
            self.error(f"expected '{ch}'")
        self.pos += 1

    def parse(self):
        e = self.parse_sum()
        self.skip_ws()
        if self.pos != len(self.src):
            self.error("unexpected trailing input")
        return e

    def parse_sum(self):
        left = self.parse_term()
        while True:
            ch = self.peek()
            if ch in ("+", "-"):
                self.pos += 1
                right = self.parse_term()
                left = Bin(ch, left, right)
            else:
                return left

    def parse_term(self):
        left = self.parse_unary()
        while True:
            ch = self.peek()
            if ch in ("*", "/"):
                self.pos += 1
                right = self.parse_unary()
                left = Bin(ch, left, right)
            else:
                return left

    def parse_unary(self):
        if self.peek() == "-":
            self.pos += 1
            inner = self.parse_unary()
            # fold negated literals so pretty-printing round-trips the AST
            if isinstance(inner, Num):
                return Num(-inner.value)
            return Neg(inner)
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        if self.peek() == "^":
            self.pos += 1
            # right-associative; exponent may carry its own unary minus
            return Bin("^", base, self.parse_unary())
        return base

    def parse_atom(self):
        ch = self.peek()
        start = self.pos
        if ch == "(":
            self.pos += 1
            e = self.parse_sum()
            self.expect(")")
            return e
        if ch.isdigit() or ch == ".":
            return self.parse_number()
        if ch.isalpha():
            return self.parse_name(start)
        self.error("expected a number, name or '('")

    def parse_number(self):
        start = self.pos
        src = self.src
        while self.pos < len(src) and (src[self.pos].isdigit() or src[self.pos] == "."):
            self.pos += 1
        if self.pos < len(src) and src[self.pos] in "eE":
            mark = self.pos
            self.pos += 1
            if self.pos < len(src) and src[self.pos] in "+-":
                self.pos += 1
            if self.pos < len(src) and src[self.pos].isdigit():
                while self.pos < len(src) and src[self.pos].isdigit():
                    self.pos += 1
            else:
                self.pos = mark  # not an exponent after all
        text = src[start:self.pos]
        try:
            return Num(float(text))
        except ValueError:
            self.error(f"bad number literal '{text}'", start)

    def parse_name(self, start):
        src = self.src
        while self.pos < len(src) and (src[self.pos].isalnum() or src[self.pos] == "_"):
            self.pos += 1
        name = src[start:self.pos]
        if name == "pi":
            return Const("pi")
        if name == "t":
            return Var("t", 0)
        if name in _FUNCTIONS:
            self.expect("(")
            args = [self.parse_sum()]
            if name in _FUNCTIONS_2:
                self.expect(",")
                args.append(self.parse_sum())
            self.expect(")")
            return Call(name, tuple(args))
        if name[0] in "xu" and name[1:].isdigit():
            idx = int(name[1:])
            dim = self.n if name[0] == "x" else self.m
            if not 1 <= idx <= dim:
                raise UnboundVariableError(
                    f"variable '{name}' out of range (declared {name[0]}-dimension {dim})",
                    start)
            return Var(name[0], idx)
        self.error(f"unknown name '{name}'", start)


def parse_expr(source, n, m):
    """Parse ``source`` against state dimension ``n`` and control dimension ``m``."""
    if not source or not source.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(source, n, m).parse()


# ---------------------------------------------------------------------------
# Pretty printing (parse ∘ to_source is the identity on ASTs)
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


def _fmt_num(v):
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_source(e):
    """Render an AST back to source text with minimal parentheses."""
    text, _ = _render(e)
    return text


def _render(e):
    if isinstance(e, Num):
        if e.value < 0:
            return f"-{_fmt_num(-e.value)}", _PREC["neg"]
        return _fmt_num(e.value), _PREC["atom"]
    if isinstance(e, Const):
        return e.name, _PREC["atom"]
    if isinstance(e, Var):
        return ("t" if e.kind == "t" else f"{e.kind}{e.index}"), _PREC["atom"]
    if isinstance(e, Neg):
        inner, prec = _render(e.arg)
        if prec < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}", _PREC["neg"]
    if isinstance(e, Call):
        return f"{e.fn}({', '.join(to_source(a) for a in e.args)})", _PREC["atom"]
    if isinstance(e, Bin):
        lp = rp = _PREC[e.op]
        if e.op in "+-":
            rp += 1          # a - (b + c) needs parens on the right
        elif e.op in "*/":
            rp += 1
        elif e.op == "^":
            lp += 1          # (a^b)^c needs parens on the left
        left, lq = _render(e.left)
        right, rq = _render(e.right)
        if lq < lp:
            left = f"({left})"
        if rq < rp:
            right = f"({right})"
        return f"{left} {e.op} {right}" if e.op in "+-" else f"{left}{e.op}{right}", _PREC[e.op]
    if isinstance(e, Piecewise):
        raise ValueError("piecewise expressions have no source form")
    raise TypeError(f"not an Expr: {e!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _check(ok, what):
    if not np.all(ok):
        raise DomainError(what)


def evaluate(e, t, x, u):
    """Evaluate ``e`` at (t, x, u).

    ``x``/``u`` are sequences of per-component values; each component and ``t``
    may be a scalar or an ndarray (all broadcastable together).  Domain
    violations raise :class:`DomainError` rather than propagating NaN.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        v = _eval(e, t, x, u)
    _check(np.isfinite(v), "non-finite value in evaluation")
    return v


def _eval(e, t, x, u):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Const):
        return math.pi
    if isinstance(e, Var):
        if e.kind == "t":
            return t
        return (x if e.kind == "x" else u)[e.index - 1]
    if isinstance(e, Neg):
        return -_eval(e.arg, t, x, u)
    if isinstance(e, Bin):
        a = _eval(e.left, t, x, u)
        b = _eval(e.right, t, x, u)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            _check(b != 0, "division by zero")
            return a / b
        return _power(a, b)
    if isinstance(e, Call):
        a = _eval(e.args[0], t, x, u)
        if e.fn == "sin":
            return np.sin(a)
        if e.fn == "cos":
            return np.cos(a)
        if e.fn == "exp":
            return np.exp(a)
        if e.fn == "log":
            _check(a > 0, "log of a non-positive value")
            return np.log(a)
        if e.fn == "sqrt":
            _check(a >= 0, "sqrt of a negative value")
            return np.sqrt(a)
        if e.fn == "abs":
            return np.abs(a)
        b = _eval(e.args[1], t, x, u)
        if e.fn == "max2":
            return np.maximum(a, b)
        if e.fn == "min2":
            return np.minimum(a, b)
    if isinstance(e, Piecewise):
        return _eval_piecewise(e, t, x, u, _eval)
    raise TypeError(f"not an Expr: {e!r}")


def _eval_piecewise(e, t, x, u, ev):
    if np.ndim(t) == 0:
        return ev(e.parts[bisect_right(e.breaks, t)], t, x, u)
    conds = []
    lo = -np.inf
    for b in e.breaks + (np.inf,):
        conds.append((np.asarray(t) >= lo) & (np.asarray(t) < b))
        lo = b
    vals = [np.broadcast_to(ev(p, t, x, u), np.shape(t)) for p in e.parts]
    return np.select(conds, vals)


def _power(a, b):
    bi = np.round(b)
    if np.all(b == bi):  # integer exponents: defined for any base except 0^neg
        _check((a != 0) | (b >= 0), "zero raised to a negative power")
        return np.power(a, b)
    _check(a > 0, "non-integer power of a non-positive base")
    return np.power(a, b)


# ---------------------------------------------------------------------------
# Forward-mode differentiation
# ---------------------------------------------------------------------------

def _tie(mask, what, lo, hi):
    if np.any(mask):
        lo = np.min(np.where(mask, lo, np.inf))
        hi = np.max(np.where(mask, hi, -np.inf))
        raise NondifferentiableError(what, (float(lo), float(hi)))


def _eval_dual(e, t, x, u, dx, du):
    """One forward sweep: value and directional derivative along (dx, du)."""
    if isinstance(e, (Num, Const)):
        return _eval(e, t, x, u), 0.0
    if isinstance(e, Var):
        if e.kind == "t":
            return t, 0.0
        if e.kind == "x":
            return x[e.index - 1], dx[e.index - 1]
        return u[e.index - 1], du[e.index - 1]
    if isinstance(e, Neg):
        v, d = _eval_dual(e.arg, t, x, u, dx, du)
        return -v, -d
    if isinstance(e, Bin):
        va, da = _eval_dual(e.left, t, x, u, dx, du)
        vb, db = _eval_dual(e.right, t, x, u, dx, du)
        if e.op == "+":
            return va + vb, da + db
        if e.op == "-":
            return va - vb, da - db
        if e.op == "*":
            return va * vb, da * vb + va * db
        if e.op == "/":
            _check(vb != 0, "division by zero")
            return va / vb, (da * vb - va * db) / (vb * vb)
        v = _power(va, vb)
        # d(a^b) = a^b (b' ln a + b a'/a); b constant-integer handled uniformly
        if np.all(db == 0):
            _check((va != 0) | (vb >= 1) | (vb == 0) | (da == 0),
                   "derivative of power at zero base")
            dv = vb * _power_diff_base(va, vb) * da
        else:
            _check(va > 0, "derivative of power with non-positive base")
            dv = v * (db * np.log(va) + vb * da / va)
        return v, dv
    if isinstance(e, Call):
        va, da = _eval_dual(e.args[0], t, x, u, dx, du)
        if e.fn == "sin":
            return np.sin(va), np.cos(va) * da
        if e.fn == "cos":
            return np.cos(va), -np.sin(va) * da
        if e.fn == "exp":
            v = np.exp(va)
            return v, v * da
        if e.fn == "log":
            _check(va > 0, "log of a non-positive value")
            return np.log(va), da / va
        if e.fn == "sqrt":
            _check(va >= 0, "sqrt of a negative value")
            v = np.sqrt(va)
            _check((va > 0) | (da == 0), "derivative of sqrt at zero")
            return v, np.where(va > 0, da / np.where(va > 0, 2 * v, 1.0), 0.0)
        if e.fn == "abs":
            _tie((va == 0) & (da != 0), "abs at zero", -np.abs(da), np.abs(da))
            return np.abs(va), np.sign(va) * da
        vb, db = _eval_dual(e.args[1], t, x, u, dx, du)
        tie = (va == vb) & (da != db)
        if e.fn == "max2":
            _tie(tie, "max2 tie", np.minimum(da, db), np.maximum(da, db))
            return np.maximum(va, vb), np.where(va >= vb, da, db)
        if e.fn == "min2":
            _tie(tie, "min2 tie", np.minimum(da, db), np.maximum(da, db))
            return np.minimum(va, vb), np.where(va <= vb, da, db)
    if isinstance(e, Piecewise):
        return _eval_dual_piecewise(e, t, x, u, dx, du)
    raise TypeError(f"not an Expr: {e!r}")


def _power_diff_base(a, b):
    # a^(b-1) for integer (or constant) b, valid at a<0 for integer exponents
    bi = np.round(b)
    if np.all(b == bi):
        with np.errstate(divide="ignore"):
            out = np.where(a == 0, 0.0, np.power(np.where(a == 0, 1.0, a), b - 1))
        return out
    return np.power(a, b - 1)


def _eval_dual_piecewise(e, t, x, u, dx, du):
    if np.ndim(t) == 0:
        return _eval_dual(e.parts[bisect_right(e.breaks, t)], t, x, u, dx, du)
    conds = []
    lo = -np.inf
    for b in e.breaks + (np.inf,):
        conds.append((np.asarray(t) >= lo) & (np.asarray(t) < b))
        lo = b
    vals, dots = [], []
    for p in e.parts:
        v, d = _eval_dual(p, t, x, u, dx, du)
        vals.append(np.broadcast_to(v, np.shape(t)))
        dots.append(np.broadcast_to(d, np.shape(t)))
    return np.select(conds, vals), np.select(conds, dots)


def grad(e, t, x, u):
    """Exact (d/dx, d/du) at a point, by one dual sweep per coordinate.

    Raises :class:`NondifferentiableError` at kinks of abs/max2/min2.
    Point components may be arrays; the gradients then share their shape.
    """
    n, m = len(x), len(u)
    zeros_x = [0.0] * n
    zeros_u = [0.0] * m
    gx, gu = [], []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for i in range(n):
            seed = list(zeros_x)
            seed[i] = 1.0
            gx.append(_eval_dual(e, t, x, u, seed, zeros_u)[1])
            _check(np.isfinite(gx[-1]), "non-finite derivative")
        for j in range(m):
            seed = list(zeros_u)
            seed[j] = 1.0
            gu.append(_eval_dual(e, t, x, u, zeros_x, seed)[1])
            _check(np.isfinite(gu[-1]), "non-finite derivative")
    return np.array(gx, dtype=float), np.array(gu, dtype=float)


def hessian(e, t, x, u):
    """Symmetric second derivative over (x, u) at a point.

    Central finite differences of the analytic gradient with step
    h = cbrt(machine epsilon) · max(1, ‖(x,u)‖), then symmetrized.
    """
    x = [float(v) for v in x]
    u = [float(v) for v in u]
    n, m = len(x), len(u)
    z = np.array(x + u, dtype=float)
    h = np.cbrt(np.finfo(float).eps) * max(1.0, float(np.linalg.norm(z)))

    def full_grad(z):
        gx, gu = grad(e, t, list(z[:n]), list(z[n:]))
        return np.concatenate([gx, gu])

    H = np.empty((n + m, n + m))
    for i in range(n + m):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        H[i] = (full_grad(zp) - full_grad(zm)) / (2 * h)
    return 0.5 * (H + H.T)


def free_vars(e):
    """Set of Var nodes appearing in ``e``."""
    out = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add(node)
        elif isinstance(node, Neg):
            stack.append(node.arg)
        elif isinstance(node, Bin):
            stack.extend((node.left, node.right))
        elif isinstance(node, Call):
            stack.extend(node.args)
        elif isinstance(node, Piecewise):
            stack.extend(node.parts)
    return out
