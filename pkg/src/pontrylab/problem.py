"""Problem definitions: control sets, dynamics, constraints, catalog.

A problem is the data of

    minimize  ℓ₀(x(0), x(T))
    s.t.      ẋ = f(t, x, u),  u ∈ U(t),
              gᵢ(t, x(t)) ≤ 0                      i = 1..s,
              ℓⱼ(x(0), x(T)) ≤ 0                   j = 1..l,
              ℓⱼ(x(0), x(T)) = 0                   j = l+1..r.

Dynamics and constraints are expression trees (:mod:`pontrylab.expr`), so
problems can live in data files and derivatives are exact.  Endpoint
functions ℓⱼ are expressions in 2n state variables under the convention
``x1..xn = x(0)`` and ``x(n+1)..x(2n) = x(T)``.

Control sets are restricted to boxes, finite sets and their unions
(optionally time-dependent through a piecewise-constant schedule); for these
the Euclidean projection, the tangent cone T(U(t), ū) and the second-order
tangent set T²(U(t), ū; u) are all available in closed form.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .expr import (
    Expr, Num, Var, Neg, Bin, Call, Const, Piecewise,
    evaluate, grad, hessian, parse_expr, to_source, free_vars, _eval_dual,
)

__all__ = [
    "Box", "FiniteSet", "UnionSet", "Schedule", "ProblemSpec",
    "project_onto_U", "control_set_at", "contains", "tangent_cone_contains",
    "second_tangent_contains", "augment_time_reparam",
    "CatalogEntry", "CATALOG", "build_catalog_problem",
    "problem_to_dict", "problem_from_dict", "load_problem_file",
    "save_problem_file",
]


# ---------------------------------------------------------------------------
# Control sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        up = tuple(float(v) for v in self.upper)
        if len(lo) != len(up):
            raise ValueError("box bound dimensions differ")
        if not all(a <= b for a, b in zip(lo, up)):
            raise ValueError("box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def dim(self):
        return len(self.lower)


@dataclass(frozen=True)
class FiniteSet:
    points: tuple  # tuple of tuples

    def __post_init__(self):
        if not self.points:
            raise ValueError("finite control set must be nonempty")
        pts = tuple(tuple(float(v) for v in p) for p in self.points)
        if len({len(p) for p in pts}) != 1:
            raise ValueError("finite-set points have mixed dimensions")
        object.__setattr__(self, "points", pts)

    @property
    def dim(self):
        return len(self.points[0])


@dataclass(frozen=True)
class UnionSet:
    box: Box
    finite: FiniteSet

    def __post_init__(self):
        if self.box.dim != self.finite.dim:
            raise ValueError("union branches have different dimensions")

    @property
    def dim(self):
        return self.box.dim


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant-in-time control set: pieces[i] on [breaks[i-1], breaks[i])."""

    breaks: tuple
    pieces: tuple

    def __post_init__(self):
        br = tuple(float(b) for b in self.breaks)
        if list(br) != sorted(set(br)):
            raise ValueError("schedule breaks must be strictly increasing")
        if len(self.pieces) != len(br) + 1:
            raise ValueError("schedule needs len(breaks)+1 pieces")
        if len({p.dim for p in self.pieces}) != 1:
            raise ValueError("schedule pieces have mixed dimensions")
        object.__setattr__(self, "breaks", br)

    @property
    def dim(self):
        return self.pieces[0].dim


def control_set_at(U, t):
    """The static set effective at time ``t`` (resolves schedules)."""
    if isinstance(U, Schedule):
        return U.pieces[bisect_right(U.breaks, t)]
    return U


def project_onto_U(U, t, u):
    """Euclidean nearest point of U(t) and the distance.

    For unions the minimum over branches is taken; exact ties go to the box
    branch, and within a finite set to the lowest point index.
    """
    piece = control_set_at(U, t)
    u = np.asarray(u, dtype=float)
    if isinstance(piece, Box):
        point = np.clip(u, piece.lower, piece.upper)
        return point, float(np.linalg.norm(u - point))
    if isinstance(piece, FiniteSet):
        best, best_d = None, np.inf
        for p in piece.points:
            d = float(np.linalg.norm(u - np.asarray(p)))
            if d < best_d:
                best, best_d = np.asarray(p, dtype=float), d
        return best, best_d
    if isinstance(piece, UnionSet):
        pb, db = project_onto_U(piece.box, t, u)
        pf, df = project_onto_U(piece.finite, t, u)
        return (pb, db) if db <= df else (pf, df)
    raise TypeError(f"not a control set: {piece!r}")


def contains(U, t, u, tol=0.0):
    return project_onto_U(U, t, u)[1] <= tol


def tangent_cone_contains(U, t, ubar, d, tol=1e-9):
    """Membership of ``d`` in the tangent cone T(U(t), ū).

    Boxes give products of ℝ / ℝ₊ / ℝ₋ / {0} by active bound; finite-set
    points give {0}.  When ū lies in the box branch of a union, the box
    governs (the finite points are isolated).
    """
    piece = control_set_at(U, t)
    ubar = np.asarray(ubar, dtype=float)
    d = np.asarray(d, dtype=float)
    if isinstance(piece, UnionSet):
        if contains(piece.box, t, ubar, tol=tol):
            piece = piece.box
        else:
            piece = piece.finite
    if isinstance(piece, Box):
        lo = np.asarray(piece.lower)
        up = np.asarray(piece.upper)
        at_lo = ubar <= lo + tol
        at_up = ubar >= up - tol
        ok = np.where(at_lo, d >= -tol, True) & np.where(at_up, d <= tol, True)
        return bool(np.all(ok))
    if isinstance(piece, FiniteSet):
        return bool(np.linalg.norm(d) <= tol)
    raise TypeError(f"not a control set: {piece!r}")


def second_tangent_contains(U, t, ubar, d, v, tol=1e-9):
    """Membership of ``v`` in the second-order tangent set T²(U(t), ū; d).

    Returns (member, nonempty).  For a box coordinate with an active bound:
    the half-line again when the tangent direction is flush (d=0), all of ℝ
    when d points strictly inward.  For finite-set points T² = {0} when d=0
    and is empty otherwise.
    """
    piece = control_set_at(U, t)
    ubar = np.asarray(ubar, dtype=float)
    d = np.asarray(d, dtype=float)
    v = np.asarray(v, dtype=float)
    if isinstance(piece, UnionSet):
        piece = piece.box if contains(piece.box, t, ubar, tol=tol) else piece.finite
    if isinstance(piece, Box):
        lo = np.asarray(piece.lower)
        up = np.asarray(piece.upper)
        ok = np.ones(ubar.shape, dtype=bool)
        at_lo = ubar <= lo + tol
        at_up = ubar >= up - tol
        flush_lo = at_lo & (np.abs(d) <= tol)
        flush_up = at_up & (np.abs(d) <= tol)
        ok &= np.where(flush_lo, v >= -tol, True)
        ok &= np.where(flush_up, v <= tol, True)
        return bool(np.all(ok)), True
    if isinstance(piece, FiniteSet):
        if np.linalg.norm(d) > tol:
            return False, False
        return bool(np.linalg.norm(v) <= tol), True
    raise TypeError(f"not a control set: {piece!r}")


def _set_dim(U):
    return control_set_at(U, 0.0).dim if isinstance(U, Schedule) else U.dim


def _stack_broadcast(values):
    shape = np.broadcast_shapes(*[np.shape(v) for v in values])
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), shape) for v in values])


# ---------------------------------------------------------------------------
# Problem specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    n: int
    m: int
    T: float
    f: tuple              # n dynamics expressions in (t, x, u)
    U: object             # control set (possibly scheduled)
    g: tuple = ()         # s state-constraint expressions in (t, x)
    ell: tuple = ()       # r+1 endpoint expressions in 2n variables; [0] is the cost
    l: int = 0            # number of endpoint inequality constraints
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "f", tuple(self.f))
        object.__setattr__(self, "g", tuple(self.g))
        object.__setattr__(self, "ell", tuple(self.ell))
        if self.n < 1 or self.m < 1:
            raise ValueError("need n >= 1 states and m >= 1 controls")
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if len(self.f) != self.n:
            raise ValueError(f"dynamics dimension {len(self.f)} != n = {self.n}")
        if not self.ell:
            raise ValueError("endpoint list must at least contain the cost")
        if not 0 <= self.l <= self.r:
            raise ValueError("need 0 <= l <= r")
        if _set_dim(self.U) != self.m:
            raise ValueError("control-set dimension != m")
        for e in self.f:
            self._check_vars(e, self.n, self.m, allow_t=True)
        for e in self.g:
            self._check_vars(e, self.n, 0, allow_t=True)
        for e in self.ell:
            self._check_vars(e, 2 * self.n, 0, allow_t=False)

    @staticmethod
    def _check_vars(e, nmax, mmax, allow_t):
        for v in free_vars(e):
            if v.kind == "t" and not allow_t:
                raise ValueError("endpoint expressions may not reference t")
            if v.kind == "x" and v.index > nmax:
                raise ValueError(f"state variable x{v.index} out of range")
            if v.kind == "u" and v.index > mmax:
                raise ValueError(f"control variable u{v.index} out of range")

    @property
    def r(self):
        return len(self.ell) - 1

    @property
    def s(self):
        return len(self.g)

    # -- dynamics ------------------------------------------------------

    def f_vector(self, t, x, u):
        """f(t,x,u); components of x/u (and t) may be batched arrays."""
        return _stack_broadcast([evaluate(e, t, x, u) for e in self.f])

    def f_jacobians(self, t, x, u):
        """(∂f/∂x, ∂f/∂u) at one point or batched along the last axis.

        Shapes (n, n) and (n, m) for scalar points, (n, n, K) / (n, m, K)
        for batched ones.
        """
        shape = np.shape(t)
        A = np.zeros((self.n, self.n) + shape)
        B = np.zeros((self.n, self.m) + shape)
        zx = [0.0] * self.n
        zu = [0.0] * self.m
        for j in range(self.n):
            seed = list(zx)
            seed[j] = 1.0
            for i, e in enumerate(self.f):
                A[i, j] = _eval_dual(e, t, x, u, seed, zu)[1]
        for j in range(self.m):
            seed = list(zu)
            seed[j] = 1.0
            for i, e in enumerate(self.f):
                B[i, j] = _eval_dual(e, t, x, u, zx, seed)[1]
        return A, B

    def f_hessians(self, t, x, u):
        """Per-component symmetric second derivatives over (x,u), shape (n, n+m, n+m)."""
        return np.stack([hessian(e, t, x, u) for e in self.f])

    # -- state constraints ----------------------------------------------

    def g_values(self, t, x):
        if not self.g:
            return np.zeros((0,) + np.shape(t))
        return _stack_broadcast([evaluate(e, t, x, []) for e in self.g])

    def g_gradient(self, i, t, x):
        """∂gᵢ/∂x; batched like the point."""
        gx, _ = grad(self.g[i], t, x, [])
        return gx

    def g_hessian(self, i, t, x):
        return hessian(self.g[i], t, x, [])

    # -- endpoint functions ----------------------------------------------

    def ell_values(self, x0, xT):
        z = list(x0) + list(xT)
        return np.array([evaluate(e, 0.0, z, []) for e in self.ell])

    def ell_gradient(self, j, x0, xT):
        """∂ℓⱼ/∂(x(0), x(T)) as a 2n-vector."""
        z = list(x0) + list(xT)
        gx, _ = grad(self.ell[j], 0.0, z, [])
        return gx

    def ell_hessian(self, j, x0, xT):
        z = list(x0) + list(xT)
        return hessian(self.ell[j], 0.0, z, [])


# ---------------------------------------------------------------------------
# Time reparameterization (free running speed)
# ---------------------------------------------------------------------------

def _substitute(e, t_repl, u_values):
    """Replace t by ``t_repl`` and each control variable by a constant."""
    if isinstance(e, (Num, Const)):
        return e
    if isinstance(e, Var):
        if e.kind == "t":
            return t_repl
        if e.kind == "u":
            return Num(u_values[e.index - 1])
        return e
    if isinstance(e, Neg):
        return Neg(_substitute(e.arg, t_repl, u_values))
    if isinstance(e, Bin):
        return Bin(e.op, _substitute(e.left, t_repl, u_values),
                   _substitute(e.right, t_repl, u_values))
    if isinstance(e, Call):
        return Call(e.fn, tuple(_substitute(a, t_repl, u_values) for a in e.args))
    raise TypeError(f"cannot substitute into {e!r}")


def _shift_endpoint_vars(e, n_old, n_new):
    """Re-index terminal-block endpoint variables when n grows."""
    if isinstance(e, Var):
        if e.kind == "x" and e.index > n_old:
            return Var("x", e.index - n_old + n_new)
        return e
    if isinstance(e, (Num, Const)):
        return e
    if isinstance(e, Neg):
        return Neg(_shift_endpoint_vars(e.arg, n_old, n_new))
    if isinstance(e, Bin):
        return Bin(e.op, _shift_endpoint_vars(e.left, n_old, n_new),
                   _shift_endpoint_vars(e.right, n_old, n_new))
    if isinstance(e, Call):
        return Call(e.fn, tuple(_shift_endpoint_vars(a, n_old, n_new) for a in e.args))
    raise TypeError(f"cannot shift {e!r}")


def augment_time_reparam(p, ubar, speed_bound=None):
    """Freeze the control at a reference ū and make running speed the control.

    Produces the problem on τ ∈ [0,1] with state (y, t), scalar control
    v ≥ 0, dynamics (v·f(t, y, ū(Tτ)), v) and the original constraints
    rewritten in (t, y); t(0)=0 and t(1)=T are appended as endpoint
    equalities.  The reference process maps to t̄(τ)=Tτ, ȳ(τ)=x̄(Tτ),
    v̄ ≡ T.

    ``ubar`` is an (N, m) array of per-interval samples on the uniform grid
    over [0, T]; requires a time-independent control set.
    """
    if isinstance(p.U, Schedule):
        raise ValueError("time reparameterization requires a time-independent control set")
    ubar = np.atleast_2d(np.asarray(ubar, dtype=float))
    if ubar.shape[1] != p.m:
        raise ValueError("reference control has wrong control dimension")
    N = ubar.shape[0]
    n_new = p.n + 1
    t_state = Var("x", n_new)
    tau_breaks = tuple(k / N for k in range(1, N))

    def frozen(e):
        parts = tuple(_substitute(e, t_state, ubar[k]) for k in range(N))
        if len(set(parts)) == 1:
            return parts[0]
        return Piecewise(tau_breaks, parts)

    v = Var("u", 1)
    f_new = tuple(Bin("*", v, frozen(e)) for e in p.f) + (v,)
    g_new = tuple(_substitute(e, t_state, ()) for e in p.g)
    ell_new = [_shift_endpoint_vars(e, p.n, n_new) for e in p.ell]
    # t(0) = 0 and t(1) = T as appended equalities
    ell_new.append(t_state)
    ell_new.append(Bin("-", Var("x", 2 * n_new), Num(p.T)))
    vmax = speed_bound if speed_bound is not None else 4.0 * max(p.T, 1.0)
    return ProblemSpec(
        n=n_new, m=1, T=1.0,
        f=f_new, U=Box((0.0,), (vmax,)),
        g=g_new, ell=tuple(ell_new), l=p.l,
        name=(p.name + "-reparam") if p.name else "reparam",
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _set_to_dict(U):
    if isinstance(U, Box):
        return {"type": "box", "lower": list(U.lower), "upper": list(U.upper)}
    if isinstance(U, FiniteSet):
        return {"type": "finite", "points": [list(p) for p in U.points]}
    if isinstance(U, UnionSet):
        return {"type": "union", "box": _set_to_dict(U.box),
                "finite": _set_to_dict(U.finite)}
    if isinstance(U, Schedule):
        return {"type": "schedule", "breaks": list(U.breaks),
                "pieces": [_set_to_dict(p) for p in U.pieces]}
    raise TypeError(f"not a control set: {U!r}")


def _set_from_dict(d):
    kind = d["type"]
    if kind == "box":
        return Box(tuple(d["lower"]), tuple(d["upper"]))
    if kind == "finite":
        return FiniteSet(tuple(tuple(p) for p in d["points"]))
    if kind == "union":
        return UnionSet(_set_from_dict(d["box"]), _set_from_dict(d["finite"]))
    if kind == "schedule":
        return Schedule(tuple(d["breaks"]), tuple(_set_from_dict(p) for p in d["pieces"]))
    raise ValueError(f"unknown control-set type {kind!r}")


def problem_to_dict(p):
    return {
        "n": p.n, "m": p.m, "T": p.T, "l": p.l,
        "dynamics": [to_source(e) for e in p.f],
        "state_constraints": [to_source(e) for e in p.g],
        "endpoint": [to_source(e) for e in p.ell],
        "control_set": _set_to_dict(p.U),
        "name": p.name,
    }


def problem_from_dict(d):
    n, m = int(d["n"]), int(d["m"])
    return ProblemSpec(
        n=n, m=m, T=float(d["T"]), l=int(d.get("l", 0)),
        f=tuple(parse_expr(s, n, m) for s in d["dynamics"]),
        g=tuple(parse_expr(s, n, 0) for s in d.get("state_constraints", [])),
        ell=tuple(parse_expr(s, 2 * n, 0) for s in d["endpoint"]),
        U=_set_from_dict(d["control_set"]),
        name=d.get("name", ""),
    )


def load_problem_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))


def save_problem_file(p, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(problem_to_dict(p), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CatalogEntry:
    builder: object
    params: dict = field(default_factory=dict)
    description: str = ""


def _build_example_5_1(params):
    n = 2
    return ProblemSpec(
        n=n, m=1, T=1.0,
        f=(parse_expr("u1", n, 1), parse_expr("x1*sin(2*pi*u1)", n, 1)),
        U=Box((0.0,), (1.0,)),
        ell=(parse_expr("x4", 2 * n, 0),       # cost x₂(T)
             parse_expr("x1", 2 * n, 0),       # x₁(0) = 0
             parse_expr("x2", 2 * n, 0)),      # x₂(0) = 0
        l=0, name="example-5-1",
    )


def _build_lq_scalar(params):
    T = float(params.get("T", 1.0))
    return ProblemSpec(
        n=1, m=1, T=T,
        f=(parse_expr("u1", 1, 1),),
        U=Box((-1.0,), (1.0,)),
        ell=(parse_expr("x2", 2, 0),           # cost x(T)
             parse_expr("x1", 2, 0)),          # x(0) = 0
        l=0, name="lq-scalar",
    )


def _build_relax_demo(params):
    T = float(params.get("T", 1.0))
    return ProblemSpec(
        n=1, m=1, T=T,
        f=(parse_expr("u1", 1, 1),),
        U=Box((0.0,), (1.0,)),
        ell=(parse_expr("x2", 2, 0), parse_expr("x1", 2, 0)),
        l=0, name="relax-demo",
    )


def _build_logistic(params):
    x0 = float(params.get("x0", 0.1))
    return ProblemSpec(
        n=1, m=1, T=1.0,
        f=(parse_expr("x1*(1 - x1) + u1", 1, 1),),
        U=Box((-1.0,), (1.0,)),
        ell=(parse_expr("x2", 2, 0), parse_expr(f"x1 - {x0}", 2, 0)),
        l=0, name="logistic",
    )


def _build_constrained_integrator(params):
    n = 2
    return ProblemSpec(
        n=n, m=1, T=2.0,
        f=(parse_expr("u1", n, 1), parse_expr("x1", n, 1)),
        U=Box((-1.0,), (1.0,)),
        g=(parse_expr("-x1", n, 0),),          # x₁ ≥ 0
        ell=(parse_expr("x4", 2 * n, 0),       # cost x₂(T)
             parse_expr("x1 - 1", 2 * n, 0),   # x₁(0) = 1
             parse_expr("x2", 2 * n, 0)),      # x₂(0) = 0
        l=0, name="constrained-integrator",
    )


CATALOG = {
    "example-5-1": CatalogEntry(
        _build_example_5_1, {},
        "2-state weak-but-not-strong minimum benchmark (cost x₂(1), ẋ₁=u, ẋ₂=x₁ sin 2πu)"),
    "lq-scalar": CatalogEntry(
        _build_lq_scalar, {"T": 1.0},
        "scalar toy: min x(T), ẋ=u, u∈[−1,1], x(0)=0; optimum u ≡ −1"),
    "relax-demo": CatalogEntry(
        _build_relax_demo, {"T": 1.0},
        "chattering/relaxation demo: ẋ=u on [0,T], u∈[0,1]"),
    "logistic": CatalogEntry(
        _build_logistic, {"x0": 0.1},
        "smooth nonlinear dynamics ẋ = x(1−x) + u for integrator order checks"),
    "constrained-integrator": CatalogEntry(
        _build_constrained_integrator, {},
        "state-constrained double integrator: min x₂(2), ẋ₁=u, ẋ₂=x₁, x₁ ≥ 0"),
}


def build_catalog_problem(name, params=None):
    try:
        entry = CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown catalog problem {name!r}; "
                       f"available: {', '.join(sorted(CATALOG))}") from None
    merged = dict(entry.params)
    merged.update(params or {})
    return entry.builder(merged)
