"""Unconstrained reduction functionals and their minimization.

A constrained problem is reduced to minimizing

    𝒥(z) = λ·ψ(x(·)) + d(Φ(x(0),x(T)), S) + K·J_k(z)        (non-singular mode)

over tuples z = (x(·), u(·), α₁..α_k), where ψ is the max of the cost gap
and the state-constraint violation, d(·,S) the Euclidean endpoint-constraint
distance, and J_k the L¹ defect of the relaxed dynamics.  The Ekeland
sequence mode adds the m⁻¹ distance terms to a moving anchor and shifts the
cost branch of ψ by m⁻².

Minimization runs over a smoothing schedule: the L¹ norms are pseudo-Huber
smoothed and the max terms softmax smoothed with parameter ε_s, each stage
solved by a projected L-BFGS quasi-Newton method (controls projected onto
U(t) and onto the search tube, α onto the simplex slab {α ≥ 0, Σα ≤ 1}).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problem import Box, control_set_at, project_onto_U
from .trajectory import ControlProcess, Grid

__all__ = [
    "PenaltyConfig", "DecisionVector", "PenaltyFunctional", "MinimizeTrace",
    "StageRegressionError", "psi", "endpoint_distance", "J_k",
    "functional_value", "minimize_functional", "optimality_alternative_drive",
    "AlternativeResult",
]


class StageRegressionError(RuntimeError):
    """A smoothing stage ended above the previous stage's value."""


@dataclass
class PenaltyConfig:
    eps0: float = 0.5                 # ‖x − x̄‖_C tube radius
    delta0: float | None = 0.25       # control tube radius (None: all of U(t))
    smoothing_schedule: tuple = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    max_iters: int = 400              # L-BFGS iterations per stage
    memory: int = 10
    stage_tol: float = 1e-8           # projected-gradient tolerance scale
    lambda_grid: tuple = tuple(0.5 ** i for i in range(11))
    tol_alt: float = 1e-7
    tol_feas: float = 1e-6
    m_sequence: tuple = (10, 100, 1000)
    n_starts: int = 0                 # extra perturbed starts in the driver
    seed: int = 0


@dataclass
class DecisionVector:
    """Unknowns of the reduction functional: states, controls, relaxation weights."""

    x: np.ndarray        # (N+1, n)
    u: np.ndarray        # (N, m)
    alphas: np.ndarray   # (k,)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.alphas = np.asarray(self.alphas, dtype=float).ravel()

    @staticmethod
    def from_process(proc, k=0):
        return DecisionVector(proc.x.copy(), proc.u.copy(), np.zeros(k))

    def to_process(self, grid):
        return ControlProcess(grid, self.x.copy(), self.u.copy())

    def pack(self):
        return np.concatenate([self.x.ravel(), self.u.ravel(), self.alphas])

    @staticmethod
    def unpack(vec, shape_x, shape_u, k):
        nx = int(np.prod(shape_x))
        nu = int(np.prod(shape_u))
        return DecisionVector(vec[:nx].reshape(shape_x),
                              vec[nx:nx + nu].reshape(shape_u),
                              vec[nx + nu:nx + nu + k])


@dataclass
class PenaltyFunctional:
    """An evaluable discretization of the reduction functional.

    ``mode`` is "nonsingular" (weights λψ + d + K·J_k) or "ekeland"
    (adds m⁻¹ distances to ``anchor`` and the m⁻² shift inside ψ).
    """

    problem: object
    grid: Grid
    u_refs: tuple = ()            # k reference controls, each (N, m)
    lam: float = 1.0
    K: float = 1.0
    ell_ref: float = 0.0          # reference cost value ℓ(x̄(0), x̄(T))
    mode: str = "nonsingular"
    m: int = 0                    # Ekeland index
    anchor: ControlProcess | None = None
    tube_center: ControlProcess | None = None

    def __post_init__(self):
        self.u_refs = tuple(np.atleast_2d(np.asarray(r, dtype=float)) for r in self.u_refs)
        if self.lam < 0:
            raise ValueError("λ must be nonnegative")
        if self.K <= 0:
            raise ValueError("K must be positive")
        if self.mode not in ("nonsingular", "ekeland"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if (self.mode == "ekeland") != (self.anchor is not None):
            raise ValueError("anchor must be present exactly in ekeland mode")
        if self.mode == "ekeland" and self.m < 1:
            raise ValueError("ekeland mode needs m >= 1")

    @property
    def k(self):
        return len(self.u_refs)


# ---------------------------------------------------------------------------
# Exact (nonsmooth) pieces
# ---------------------------------------------------------------------------

def psi(p, proc, ell_ref, shift=0.0):
    """max{ℓ(x(0),x(T)) − ℓ_ref (+ shift),  max over nodes of max_i gᵢ}."""
    cost = float(p.ell_values(proc.x[0], proc.x[-1])[0]) - ell_ref + shift
    if not p.g:
        return cost
    g = p.g_values(proc.grid.times, list(proc.x.T))
    return max(cost, float(g.max()))


def endpoint_distance(p, proc):
    """Euclidean distance of (ℓ₁..ℓ_r) to the constraint set {≤0}^l × {0}^{r−l}."""
    vals = p.ell_values(proc.x[0], proc.x[-1])
    acc = 0.0
    for j in range(1, p.r + 1):
        v = float(vals[j])
        if j <= p.l:
            v = max(v, 0.0)
        acc += v * v
    return float(np.sqrt(acc))


def _relaxed_field(p, grid, x, u, u_refs, alphas):
    """Midpoint values of the relaxed RHS and the interval slopes/defects."""
    tm = grid.midpoints
    xm = 0.5 * (x[:-1] + x[1:])
    xm_cols = list(xm.T)
    base = p.f_vector(tm, xm_cols, list(u.T)).T          # (N, n)
    phi = (1.0 - alphas.sum()) * base
    for a, ref in zip(alphas, u_refs):
        phi = phi + a * p.f_vector(tm, xm_cols, list(ref.T)).T
    slope = np.diff(x, axis=0) / grid.steps[:, None]
    return slope - phi, base


def J_k(p, z, u_refs, grid):
    """Midpoint-rule L¹ defect of the relaxed dynamics Eq.-style field."""
    refs = [np.atleast_2d(np.asarray(r, dtype=float)) for r in u_refs]
    d, _ = _relaxed_field(p, grid, z.x, z.u, refs, z.alphas)
    return float(np.sum(np.linalg.norm(d, axis=1) * grid.steps))


def functional_value(F, z):
    """Exact (unsmoothed) value of the selected reduction functional."""
    p = F.problem
    proc = z.to_process(F.grid)
    shift = (1.0 / F.m ** 2) if F.mode == "ekeland" else 0.0
    val = F.lam * psi(p, proc, F.ell_ref, shift) + endpoint_distance(p, proc) \
        + F.K * J_k(p, z, F.u_refs, F.grid)
    if F.mode == "ekeland":
        a = F.anchor
        dx = float(np.max(np.abs(z.x - a.x))) if z.x.size else 0.0
        du = float(np.sum(np.linalg.norm(z.u - a.u, axis=1) * F.grid.steps))
        dref = sum(float(ai) * float(np.sum(np.linalg.norm(r - a.u, axis=1) * F.grid.steps))
                   for ai, r in zip(z.alphas, F.u_refs))
        val += (dx + du + dref) / F.m
    return float(val)


# ---------------------------------------------------------------------------
# Smoothed value and analytic gradient
# ---------------------------------------------------------------------------

def _pseudo_huber(r2, eps):
    """sqrt(r² + ε²) − ε and the factor d/dr² · 2 = 1/sqrt(r²+ε²)."""
    root = np.sqrt(r2 + eps * eps)
    return root - eps, 1.0 / root


def _softmax(entries, eps):
    """LSE_ε and the softmax weights."""
    arr = np.asarray(entries, dtype=float)
    M = arr.max()
    w = np.exp((arr - M) / eps)
    s = w.sum()
    return M + eps * float(np.log(s)), w / s


def _softplus(v, eps):
    """ε·log(1+e^{v/ε}) and its derivative, overflow-safe."""
    t = v / eps
    out = np.where(t > 30, v, eps * np.log1p(np.exp(np.minimum(t, 30))))
    dout = np.where(t > 30, 1.0, 1.0 / (1.0 + np.exp(-np.clip(t, -700, 700))))
    return out, dout


def _smoothed_value_grad(F, z, eps):
    """Smoothed functional value and its gradient in the packed coordinates."""
    p = F.problem
    grid = F.grid
    N = grid.N
    n, mdim = p.n, p.m
    x, u, alphas = z.x, z.u, z.alphas
    steps = grid.steps
    gx = np.zeros_like(x)
    gu = np.zeros_like(u)
    ga = np.zeros_like(alphas)
    tm = grid.midpoints
    xm_cols = list((0.5 * (x[:-1] + x[1:])).T)
    u_cols = list(u.T)

    # --- K·J_k: pseudo-Huber of per-interval defect norms -----------------
    d, base = _relaxed_field(p, grid, x, u, F.u_refs, alphas)
    r2 = np.sum(d * d, axis=1)
    hval, hfac = _pseudo_huber(r2, eps)
    value = F.K * float(np.sum(hval * steps))
    w = F.K * (hfac * steps)[:, None] * d          # ∂/∂d, shape (N, n)

    A_base, B_base = p.f_jacobians(tm, xm_cols, u_cols)   # (n,n,N), (n,m,N)
    resid_alpha = 1.0 - alphas.sum()
    A_mix = resid_alpha * A_base
    f_refs = []
    for a, ref in zip(alphas, F.u_refs):
        A_r, _ = p.f_jacobians(tm, xm_cols, list(ref.T))
        A_mix = A_mix + a * A_r
        f_refs.append(p.f_vector(tm, xm_cols, list(ref.T)).T)

    # slope part: ∂d/∂x_k = −I/Δ − ½∂Φ/∂xm, ∂d/∂x_{k+1} = +I/Δ − ½∂Φ/∂xm
    winv = w / steps[:, None]
    gx[:-1] -= winv
    gx[1:] += winv
    mix = np.einsum("kn,njk->kj", w, A_mix)        # wᵀ ∂Φ/∂xm per interval
    gx[:-1] -= 0.5 * mix
    gx[1:] -= 0.5 * mix
    gu -= resid_alpha * np.einsum("kn,njk->kj", w, B_base)
    for i, fr in enumerate(f_refs):
        ga[i] -= float(np.sum(w * (fr - base)))

    # --- λ·ψ: softmax of cost gap and nodal state constraints -------------
    if F.lam:
        shift = (1.0 / F.m ** 2) if F.mode == "ekeland" else 0.0
        cost = float(p.ell_values(x[0], x[-1])[0]) - F.ell_ref + shift
        entries = [cost]
        g_nodes = None
        if p.g:
            g_nodes = p.g_values(grid.times, list(x.T))    # (s, N+1)
            entries.extend(g_nodes.ravel())
        pval, wts = _softmax(entries, eps)
        value += F.lam * pval
        c_grad = p.ell_gradient(0, x[0], x[-1])
        gx[0] += F.lam * wts[0] * c_grad[:n]
        gx[-1] += F.lam * wts[0] * c_grad[n:]
        if p.g:
            wg = wts[1:].reshape(p.s, N + 1)
            for i in range(p.s):
                gi = p.g_gradient(i, grid.times, list(x.T))   # (n, N+1)
                gx += F.lam * (wg[i][:, None] * gi.T)

    # --- d(Φ, S): smooth Euclidean endpoint distance -----------------------
    if p.r:
        vals = p.ell_values(x[0], x[-1])
        comps = np.empty(p.r)
        dcomp = np.empty(p.r)
        for j in range(1, p.r + 1):
            if j <= p.l:
                comps[j - 1], dcomp[j - 1] = _softplus(float(vals[j]), eps)
            else:
                comps[j - 1], dcomp[j - 1] = float(vals[j]), 1.0
        root = np.sqrt(np.sum(comps * comps) + eps * eps)
        value += root - eps
        for j in range(1, p.r + 1):
            coef = comps[j - 1] * dcomp[j - 1] / root
            gj = p.ell_gradient(j, x[0], x[-1])
            gx[0] += coef * gj[:n]
            gx[-1] += coef * gj[n:]

    # --- Ekeland m⁻¹ distance terms ---------------------------------------
    if F.mode == "ekeland":
        inv_m = 1.0 / F.m
        a = F.anchor
        # ‖x − x̄_m‖_C smoothed as LSE over ±(entries)
        diffs = (x - a.x).ravel()
        cval, cw = _softmax(np.concatenate([diffs, -diffs]), eps)
        value += inv_m * cval
        gx += inv_m * (cw[:diffs.size] - cw[diffs.size:]).reshape(x.shape)
        # ∫‖u − ū_m‖ pseudo-Huber per interval
        du = u - a.u
        r2u = np.sum(du * du, axis=1)
        hu, hfu = _pseudo_huber(r2u, eps)
        value += inv_m * float(np.sum(hu * steps))
        gu += inv_m * (hfu * steps)[:, None] * du
        # Σ αᵢ ∫‖uᵢ − ū_m‖ (exact; linear in α)
        for i, ref in enumerate(F.u_refs):
            ci = float(np.sum(np.linalg.norm(ref - a.u, axis=1) * steps))
            value += inv_m * alphas[i] * ci
            ga[i] += inv_m * ci

    return value, np.concatenate([gx.ravel(), gu.ravel(), ga])


# ---------------------------------------------------------------------------
# Projection onto the feasible tube
# ---------------------------------------------------------------------------

def _project_alphas(a):
    a = np.maximum(a, 0.0)
    s = a.sum()
    if s <= 1.0 or a.size == 0:
        return a
    # Euclidean projection onto the simplex {α ≥ 0, Σα = 1}
    srt = np.sort(a)[::-1]
    css = np.cumsum(srt) - 1.0
    rho = np.nonzero(srt - css / (np.arange(a.size) + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(a - theta, 0.0)


def _project_controls(U, grid, u, center_u, delta0):
    out = np.empty_like(u)
    piece0 = control_set_at(U, 0.0)
    static_box = isinstance(U, Box)
    if static_box and delta0 is None:
        return np.clip(u, piece0.lower, piece0.upper)
    if static_box:
        lo = np.maximum(piece0.lower, center_u - delta0)
        hi = np.minimum(piece0.upper, center_u + delta0)
        return np.clip(u, lo, hi)
    tm = grid.midpoints
    for k in range(grid.N):
        piece = control_set_at(U, tm[k])
        if isinstance(piece, Box) and delta0 is not None:
            lo = np.maximum(piece.lower, center_u[k] - delta0)
            hi = np.minimum(piece.upper, center_u[k] + delta0)
            out[k] = np.clip(u[k], lo, hi)
        elif isinstance(piece, Box):
            out[k] = np.clip(u[k], piece.lower, piece.upper)
        else:
            out[k] = project_onto_U(piece, tm[k], u[k])[0]
    return out


def _make_projector(F, cfg):
    center = F.tube_center if F.tube_center is not None else F.anchor
    if center is None:
        raise ValueError("functional needs a tube center (candidate or anchor)")
    lo_x = center.x - cfg.eps0
    hi_x = center.x + cfg.eps0
    shape_x, shape_u, k = center.x.shape, center.u.shape, F.k

    def proj(vec):
        z = DecisionVector.unpack(vec, shape_x, shape_u, k)
        z.x = np.clip(z.x, lo_x, hi_x)
        z.u = _project_controls(F.problem.U, F.grid, z.u, center.u, cfg.delta0)
        z.alphas = _project_alphas(z.alphas)
        return z.pack()

    return proj, shape_x, shape_u, k


# ---------------------------------------------------------------------------
# Projected L-BFGS over the smoothing schedule
# ---------------------------------------------------------------------------

@dataclass
class MinimizeTrace:
    stages: list = field(default_factory=list)  # (eps, iters, smoothed, exact)

    @property
    def final_value(self):
        return self.stages[-1][3] if self.stages else np.nan


def _two_loop(g, mem):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, rho = mem[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def _lbfgs_stage(fun, proj, v0, max_iters, tol, memory):
    v = proj(v0)
    val, g = fun(v)
    mem = []
    iters = 0
    for iters in range(1, max_iters + 1):
        pg = v - proj(v - g)
        if np.max(np.abs(pg)) <= tol * (1.0 + abs(val)):
            break
        d = -_two_loop(g, mem)
        if np.dot(d, g) > -1e-14 * np.linalg.norm(d) * np.linalg.norm(g):
            d = -g
        step = 1.0
        accepted = False
        while step >= 1e-14:
            v_new = proj(v + step * d)
            if not np.any(v_new != v):
                break
            val_new, g_new = fun(v_new)
            if val_new <= val + 1e-4 * np.dot(g, v_new - v):
                accepted = True
                break
            step *= 0.5
        if not accepted and not np.array_equal(d, -g):
            d = -g
            step = 1.0
            while step >= 1e-14:
                v_new = proj(v + step * d)
                if not np.any(v_new != v):
                    break
                val_new, g_new = fun(v_new)
                if val_new <= val + 1e-4 * np.dot(g, v_new - v):
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            break
        s = v_new - v
        y = g_new - g
        sy = np.dot(s, y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            mem.append((s, y, 1.0 / sy))
            if len(mem) > memory:
                mem.pop(0)
        v, val, g = v_new, val_new, g_new
    return v, val, iters


def minimize_functional(F, z0, cfg=None):
    """Smoothed descent over the ε-schedule; returns (z*, trace).

    Raises :class:`StageRegressionError` when a stage ends measurably above
    the previous stage's exact value (beyond the stage smoothing error).
    """
    cfg = cfg or PenaltyConfig()
    proj, shape_x, shape_u, k = _make_projector(F, cfg)
    center = F.tube_center if F.tube_center is not None else F.anchor
    if float(np.max(np.abs(z0.x - center.x))) > cfg.eps0 + 1e-12:
        raise ValueError("start point outside the ε₀ tube of the anchor/reference")
    v = proj(z0.pack())
    trace = MinimizeTrace()
    best_v = v
    best_exact = functional_value(F, DecisionVector.unpack(v, shape_x, shape_u, k))
    prev_exact = None
    for eps in cfg.smoothing_schedule:
        def fun(vec, eps=eps):
            z = DecisionVector.unpack(vec, shape_x, shape_u, k)
            return _smoothed_value_grad(F, z, eps)

        v, smoothed, iters = _lbfgs_stage(fun, proj, v, cfg.max_iters,
                                          cfg.stage_tol, cfg.memory)
        exact = functional_value(F, DecisionVector.unpack(v, shape_x, shape_u, k))
        trace.stages.append((eps, iters, smoothed, exact))
        if exact < best_exact:
            best_v, best_exact = v, exact
        if prev_exact is not None and exact > prev_exact + 1e-9 * (1 + abs(prev_exact)) + eps:
            raise StageRegressionError(
                f"stage ε={eps:g} ended at {exact:.12g} above previous {prev_exact:.12g}")
        prev_exact = exact
    return DecisionVector.unpack(best_v, shape_x, shape_u, k), trace


# ---------------------------------------------------------------------------
# Optimality alternative driver
# ---------------------------------------------------------------------------

@dataclass
class AlternativeResult:
    kind: str                      # "nonsingular" | "singular" | "inconclusive"
    lam: float | None = None
    minimizer: DecisionVector | None = None
    sequence: list = field(default_factory=list)   # (m, DecisionVector) anchors
    traces: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def _perturbed_starts(z0, cfg, rng, count):
    starts = [z0]
    for _ in range(count):
        z = DecisionVector(z0.x + rng.uniform(-0.1, 0.1, z0.x.shape) * cfg.eps0,
                           z0.u + rng.uniform(-0.1, 0.1, z0.u.shape),
                           z0.alphas.copy())
        starts.append(z)
    return starts


def optimality_alternative_drive(p, candidate, u_refs=(), cfg=None):
    """Certify the reduction alternative at a candidate process.

    Walks λ down a dyadic grid; if for some λ the minimized non-singular
    functional stays above its value at the candidate (−tol_alt), the case is
    non-singular.  Otherwise an Ekeland sequence of near-minimizers anchored
    at the best infeasible point is constructed; it certifies the singular
    case when every anchor stays endpoint-infeasible while solving the
    dynamics.  Reports "inconclusive" when neither certificate is reached.
    """
    cfg = cfg or PenaltyConfig()
    rng = np.random.default_rng(cfg.seed)
    grid = candidate.grid
    ell_ref = float(p.ell_values(candidate.x[0], candidate.x[-1])[0])
    k = len(u_refs)
    z_cand = DecisionVector.from_process(candidate, k)
    traces = []
    best_infeasible = None
    best_infeasible_val = np.inf
    for lam in cfg.lambda_grid:
        F = PenaltyFunctional(p, grid, u_refs=u_refs, lam=lam, ell_ref=ell_ref,
                              tube_center=candidate)
        threshold = functional_value(F, z_cand) - cfg.tol_alt
        best_val, best_z = np.inf, None
        for z0 in _perturbed_starts(z_cand, cfg, rng, cfg.n_starts):
            z0 = DecisionVector.unpack(_make_projector(F, cfg)[0](z0.pack()),
                                       z_cand.x.shape, z_cand.u.shape, k)
            z_star, trace = minimize_functional(F, z0, cfg)
            val = functional_value(F, z_star)
            traces.append((lam, trace))
            if val < best_val:
                best_val, best_z = val, z_star
        if best_val >= threshold:
            return AlternativeResult("nonsingular", lam=lam, minimizer=best_z,
                                     traces=traces,
                                     diagnostics={"value": best_val,
                                                  "threshold": threshold})
        proc = best_z.to_process(grid)
        dist = endpoint_distance(p, proc)
        if dist > cfg.tol_feas and best_val < best_infeasible_val:
            best_infeasible, best_infeasible_val = best_z, best_val

    if best_infeasible is None:
        return AlternativeResult("inconclusive", traces=traces,
                                 diagnostics={"reason": "descent found but feasible"})

    sequence = []
    anchor_z = best_infeasible
    for m in cfg.m_sequence:
        # the anchor moves but the search tube stays the candidate's Z_k
        anchor_proc = anchor_z.to_process(grid)
        F_m = PenaltyFunctional(p, grid, u_refs=u_refs, lam=0.0, K=1.0,
                                ell_ref=ell_ref, mode="ekeland", m=m,
                                anchor=anchor_proc, tube_center=candidate)
        z_m, trace = minimize_functional(F_m, DecisionVector.from_process(anchor_proc, k), cfg)
        traces.append((f"m={m}", trace))
        proc_m = z_m.to_process(grid)
        dist = endpoint_distance(p, proc_m)
        jk = J_k(p, z_m, u_refs, grid)
        if dist <= cfg.tol_feas or jk > 1e-6:
            return AlternativeResult("inconclusive", traces=traces,
                                     diagnostics={"reason": "ekeland anchor became feasible",
                                                  "distance": dist, "J_k": jk})
        sequence.append((m, z_m))
        anchor_z = z_m
    return AlternativeResult("singular", sequence=sequence, traces=traces,
                             diagnostics={"endpoint_distance": dist})
