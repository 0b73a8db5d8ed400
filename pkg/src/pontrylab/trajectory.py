"""Grids, trajectories, integration, relaxation and the regularity bound.

States are piecewise linear between grid nodes and controls are piecewise
constant on the (left-closed) grid intervals.  This is the coarsest
representation under which the L¹ dynamics residual and chattering switch
points are exactly representable; accuracy comes from grid refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid", "ControlProcess", "ResidualReport", "RegularityReport",
    "IntegrationBlowupError", "RegularityHypothesisError",
    "integrate_forward", "relaxed_rhs", "integrate_relaxed",
    "chattering_control", "integrate_variational", "residual",
    "regularity_check", "reparam_reference",
]


class IntegrationBlowupError(ArithmeticError):
    """State became non-finite; ``interval`` is the first bad interval index."""

    def __init__(self, interval, t):
        super().__init__(f"state blow-up while integrating interval {interval} (t = {t:g})")
        self.interval = interval


class RegularityHypothesisError(ArithmeticError):
    """Residual too large for the regularity estimate to apply."""

    def __init__(self, lhs, eps):
        super().__init__(
            f"hypothesis violated: (1 + ∫k)·residual = {lhs:.6g} ≥ ε = {eps:.6g}")
        self.lhs = lhs
        self.eps = eps


@dataclass(frozen=True)
class Grid:
    nodes: tuple

    def __post_init__(self):
        nodes = tuple(float(t) for t in self.nodes)
        if len(nodes) < 2 or nodes[0] != 0.0:
            raise ValueError("grid needs t0 = 0 and at least one interval")
        if any(b <= a for a, b in zip(nodes, nodes[1:])):
            raise ValueError("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @staticmethod
    def uniform(N, T):
        if N < 1:
            raise ValueError("need at least one interval")
        return Grid(tuple(T * k / N for k in range(N + 1)))

    @property
    def N(self):
        """Interval count."""
        return len(self.nodes) - 1

    @property
    def T(self):
        return self.nodes[-1]

    @property
    def times(self):
        return np.asarray(self.nodes)

    @property
    def steps(self):
        return np.diff(self.times)

    @property
    def midpoints(self):
        t = self.times
        return 0.5 * (t[:-1] + t[1:])

    def interval_of(self, t):
        """Index k with t ∈ [t_k, t_{k+1}); t = T maps to the last interval."""
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(k, 0), self.N - 1)


@dataclass
class ControlProcess:
    """A grid-sampled control process (x(·), u(·)).

    ``x`` has one row per node (piecewise-linear in between); ``u`` one row
    per interval (piecewise-constant, left-closed).
    """

    grid: Grid
    x: np.ndarray
    u: np.ndarray
    feasibility: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if self.x.shape[0] != self.grid.N + 1:
            raise ValueError("x must have one row per grid node")
        if self.u.shape[0] != self.grid.N:
            raise ValueError("u must have one row per grid interval")

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def m(self):
        return self.u.shape[1]

    def x_at(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.grid.times, self.x[:, i])
                         for i in range(self.n)], axis=-1)

    def u_at(self, t):
        ks = np.clip(np.searchsorted(self.grid.times, np.asarray(t), side="right") - 1,
                     0, self.grid.N - 1)
        return self.u[ks]

    def slopes(self):
        """Per-interval ẋ of the piecewise-linear state, shape (N, n)."""
        return np.diff(self.x, axis=0) / self.grid.steps[:, None]


def _rhs(p, t, x, u):
    val = p.f_vector(t, list(x), list(u))
    if not np.all(np.isfinite(val)):
        raise ArithmeticError("non-finite dynamics value")
    return val


def _rk4_step(fun, t, x, h):
    k1 = fun(t, x)
    k2 = fun(t + h / 2, x + h / 2 * k1)
    k3 = fun(t + h / 2, x + h / 2 * k2)
    k4 = fun(t + h, x + h * k3)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_forward(p, x0, u, grid):
    """Classical fixed-step RK4 over the grid with per-interval controls."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[0] != grid.N:
        raise ValueError("need one control sample per interval")
    x = np.empty((grid.N + 1, p.n))
    x[0] = np.asarray(x0, dtype=float)
    t = grid.times
    for k in range(grid.N):
        uk = u[k]
        try:
            x[k + 1] = _rk4_step(lambda s, y: _rhs(p, s, y, uk), t[k], x[k], t[k + 1] - t[k])
        except ArithmeticError as exc:
            raise IntegrationBlowupError(k, t[k]) from exc
        if not np.all(np.isfinite(x[k + 1])):
            raise IntegrationBlowupError(k, t[k])
    return ControlProcess(grid, x, u)


def relaxed_rhs(p, t, x, u, u_refs, alphas):
    """Convexified right-hand side f(t,x,u) + Σαᵢ(f(t,x,uᵢ) − f(t,x,u))."""
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas < 0) or alphas.sum() > 1 + 1e-12:
        raise ValueError("need αᵢ ≥ 0 with Σαᵢ ≤ 1")
    base = p.f_vector(t, list(x), list(u))
    out = np.array(base, dtype=float)
    for a, ur in zip(alphas, u_refs):
        if a:
            out += a * (p.f_vector(t, list(x), list(ur)) - base)
    return out


def integrate_relaxed(p, x0, u, u_refs, alphas, grid):
    """RK4 on the relaxed dynamics; ``u_refs`` are per-interval sample arrays."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    refs = [np.atleast_2d(np.asarray(r, dtype=float)) for r in u_refs]
    x = np.empty((grid.N + 1, p.n))
    x[0] = np.asarray(x0, dtype=float)
    t = grid.times
    for k in range(grid.N):
        uk = u[k]
        rk = [r[k] for r in refs]
        fun = lambda s, y: relaxed_rhs(p, s, y, uk, rk, alphas)
        x[k + 1] = _rk4_step(fun, t[k], x[k], t[k + 1] - t[k])
        if not np.all(np.isfinite(x[k + 1])):
            raise IntegrationBlowupError(k, t[k])
    return ControlProcess(grid, x, u)


def chattering_control(u, u_refs, alphas, s, grid, tol=1e-9):
    """Fast-switching realization of the relaxed control.

    [0,T] is split into s equal windows; inside each, disjoint sub-intervals
    of lengths αᵢT/s are packed consecutively from the left end in index
    order and carry uᵢ(·); the remainder keeps u(·).  The grid must contain
    every switch point.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    refs = [np.atleast_2d(np.asarray(r, dtype=float)) for r in u_refs]
    alphas = np.asarray(alphas, dtype=float)
    if np.any(alphas < 0) or alphas.sum() >= 1 + 1e-12:
        raise ValueError("chattering requires αᵢ ≥ 0 with Σαᵢ < 1")
    if s < 1:
        raise ValueError("need s >= 1")
    if not np.any(alphas):
        return u.copy()
    T = grid.T
    L = T / s
    switch = []
    for j in range(s):
        t0 = j * L
        switch.append(t0)
        acc = t0
        for a in alphas:
            acc += a * L
            switch.append(acc)
    nodes = grid.times
    for sw in switch:
        k = np.argmin(np.abs(nodes - sw))
        if abs(nodes[k] - sw) > tol * max(T, 1.0):
            raise ValueError(
                f"grid too coarse: switch point t = {sw:.12g} not on the grid")
    out = u.copy()
    mids = grid.midpoints
    bounds = np.cumsum(np.concatenate([[0.0], alphas])) * L
    for k, tm in enumerate(mids):
        j = min(int(tm / L), s - 1)
        off = tm - j * L
        idx = np.searchsorted(bounds, off, side="right") - 1
        if 0 <= idx < len(alphas) and off < bounds[idx + 1]:
            out[k] = refs[idx][k]
    return out


def integrate_variational(p, base, h0, u, beta, w=None):
    """Linearized dynamics along ``base``:

        ḣ = f̄ₓ'(t) h + f̄ᵤ'(t) u(t) + β (f(t, x̄(t), w(t)) − f(t, x̄(t), ū(t)))

    integrated by fixed-step RK4; returns h at the grid nodes, shape (N+1, n).
    """
    grid = base.grid
    u = np.atleast_2d(np.asarray(u, dtype=float))
    if u.shape[0] != grid.N:
        raise ValueError("need one direction sample per interval")
    if beta and w is None:
        raise ValueError("β > 0 requires a comparison control w")
    w = None if w is None else np.atleast_2d(np.asarray(w, dtype=float))
    h = np.empty((grid.N + 1, p.n))
    h[0] = np.asarray(h0, dtype=float)
    t = grid.times
    for k in range(grid.N):
        uk = u[k]
        ubark = base.u[k]
        wk = None if w is None else w[k]

        def fun(s, y):
            xs = base.x_at(s)
            A, B = p.f_jacobians(s, list(xs), list(ubark))
            out = A @ y + B @ uk
            if beta:
                out = out + beta * (p.f_vector(s, list(xs), list(wk))
                                    - p.f_vector(s, list(xs), list(ubark)))
            return out

        h[k + 1] = _rk4_step(fun, t[k], h[k], t[k + 1] - t[k])
    return h


@dataclass(frozen=True)
class ResidualReport:
    l1_residual: float
    sup_residual: float
    per_interval: np.ndarray  # trapezoid contribution of each interval

    def __post_init__(self):
        if self.l1_residual < 0 or self.sup_residual < 0:
            raise ValueError("residuals must be nonnegative")


def residual(p, proc):
    """Trapezoid quadrature of ‖ẋ − f(t, x, u)‖ with ẋ the piecewise slope."""
    grid = proc.grid
    t = grid.times
    d = proc.slopes()
    left = np.empty(grid.N)
    right = np.empty(grid.N)
    for k in range(grid.N):
        fk0 = p.f_vector(t[k], list(proc.x[k]), list(proc.u[k]))
        fk1 = p.f_vector(t[k + 1], list(proc.x[k + 1]), list(proc.u[k]))
        left[k] = np.linalg.norm(d[k] - fk0)
        right[k] = np.linalg.norm(d[k] - fk1)
    per = 0.5 * (left + right) * grid.steps
    return ResidualReport(float(per.sum()), float(max(left.max(), right.max())),
                          per)


@dataclass(frozen=True)
class RegularityReport:
    residual: float
    lipschitz_integral: float
    K: float
    bound: float
    realized_distance: float

    @property
    def satisfied(self):
        return self.realized_distance <= self.bound


def _estimate_lipschitz(p, proc, eps0, samples, rng, safety):
    """Per-interval Lipschitz modulus of f(t, ·, u) on the ε₀-tube around x̄."""
    grid = proc.grid
    mids = grid.midpoints
    k_est = np.zeros(grid.N)
    for k in range(grid.N):
        xc = proc.x_at(mids[k])
        uk = list(proc.u[k])
        best = 0.0
        for _ in range(samples):
            a = xc + rng.uniform(-eps0, eps0, size=proc.n)
            b = xc + rng.uniform(-eps0, eps0, size=proc.n)
            gap = np.linalg.norm(a - b)
            if gap < 1e-12:
                continue
            num = np.linalg.norm(p.f_vector(mids[k], list(a), uk)
                                 - p.f_vector(mids[k], list(b), uk))
            best = max(best, num / gap)
        k_est[k] = safety * best
    return k_est


def regularity_check(p, proc, eps0=0.5, samples=8, safety=1.5, rng=None):
    """Distance-to-solution-set bound from the dynamics residual.

    Estimates a Lipschitz modulus k(t) by sampling f over the ε₀-tube,
    requires (1 + ∫k)·residual < ε₀, then certifies that the W¹,¹ distance
    to the solution through the same x(0) and u(·) is at most K·residual
    with K = (1 + ∫k)·e^{∫k}.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    elif isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    res = residual(p, proc).l1_residual
    k_est = _estimate_lipschitz(p, proc, eps0, samples, rng, safety)
    kint = float(np.sum(k_est * proc.grid.steps))
    lhs = (1.0 + kint) * res
    if lhs >= eps0:
        raise RegularityHypothesisError(lhs, eps0)
    K = (1.0 + kint) * np.exp(kint)
    candidate = integrate_forward(p, proc.x[0], proc.u, proc.grid)
    diff = proc.slopes() - candidate.slopes()
    realized = float(np.sum(np.linalg.norm(diff, axis=1) * proc.grid.steps))
    return RegularityReport(res, kint, float(K), float(K * res), realized)


def reparam_reference(p, proc):
    """Map a process of ``p`` to the reference of the time-reparameterized problem.

    Returns the process (ȳ(τ), t̄(τ)) = (x̄(Tτ), Tτ) with v̄ ≡ T on the
    τ-grid induced by the original grid.
    """
    T = p.T
    tau = tuple(t / T for t in proc.grid.nodes)
    x_new = np.hstack([proc.x, proc.grid.times[:, None]])
    u_new = np.full((proc.grid.N, 1), T)
    return ControlProcess(Grid(tau), x_new, u_new)
