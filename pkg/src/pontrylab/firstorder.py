"""First-order certificates: Hamiltonian, BV adjoint, multiplier extraction.

For a candidate process (x̄(·), ū(·)) the maximum-principle relations are

    normalization   Σ_{i≤l} λᵢ + Σ_{i>l} |λᵢ| + Σᵢ μᵢ([0,T]) = 1,
    slackness       λᵢ ℓᵢ(x̄(0), x̄(T)) = 0,                      i = 1..l,
    transversality  (p(0), −(p(T) + Σ g_ix'(T,x̄(T)) μᵢ({T}))) = Σ λᵢ ℓᵢ',
    adjoint         p(t) = (p(T) + Σ g_ix'(T) μᵢ({T})) + ∫_t^T H_x' ds
                           − Σ ∫_{[t,T)} g_ix'(s, x̄(s)) μᵢ(ds),
    maximum         H(t, x̄, p, ū) = Ĥ(t, x̄, p)   a.e.

with H(t,x,p,u) = ⟨p, f(t,x,u)⟩ and nonnegative measures μᵢ supported on
{gᵢ = 0}.  The costate is left-continuous BV; a measure atom at tₙ < T makes
p jump by −g_ix'(tₙ)μᵢ({tₙ}) when crossing tₙ backward.

Because the adjoint system is linear in (terminal data, measures), the set Λ
of multiplier tuples is a polytope: multipliers are extracted by a linear
feasibility problem whose rows are the normalization, slackness, support,
transversality and the integral maximum-principle inequalities

    ∫ ⟨p(t), f(t,x̄(t),ū(t)) − f(t,x̄(t),u_c(t))⟩ dt ≥ 0

over a family of comparison controls (a per-interval lattice realizes the
pointwise maximum principle at grid resolution).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .problem import Box, FiniteSet, Schedule, UnionSet, control_set_at
from .trajectory import _rk4_step

__all__ = [
    "Costate", "MultiplierTuple", "MPReport", "ExtractResult",
    "hamiltonian", "hamiltonian_sup", "integrate_adjoint",
    "adjoint_forward_form", "extract_multipliers", "mp_residuals",
    "comparison_family", "nonsingularity_h12", "BolzaModel",
    "bolza_stationarity_check",
]


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def hamiltonian(p, t, x, pvec, u):
    """H(t,x,p,u) = ⟨p, f(t,x,u)⟩."""
    return float(np.dot(np.asarray(pvec, dtype=float),
                        p.f_vector(t, list(x), list(u))))


def _h_batch(p, t, x, pvec, u_cols):
    vals = p.f_vector(t, list(x), u_cols)
    return np.tensordot(np.asarray(pvec, dtype=float), vals, axes=(0, 0))


def _box_lattice(piece, count):
    axes = [np.unique(np.concatenate([np.linspace(lo, hi, count), [lo, hi]]))
            for lo, hi in zip(piece.lower, piece.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _golden_refine(score, lo, hi, iters=80):
    invphi = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = score(c), score(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = score(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = score(d)
    return c if fc >= fd else d


def hamiltonian_sup(p, t, x, pvec, sampling=None, extra=()):
    """Ĥ(t,x,p) = sup_{u ∈ U(t)} H and a maximizer.

    Finite sets are maximized exhaustively.  Boxes are sampled on a lattice
    (32 points per coordinate plus corners by default, or a ``{"step": h}``
    sampling) and the best point refined per coordinate by golden section.
    Ties go to the lexicographically smallest maximizer.
    """
    piece = control_set_at(p.U, t)
    best_val, best_u = -np.inf, None

    def consider(candidates):
        nonlocal best_val, best_u
        if len(candidates) == 0:
            return
        cand = np.atleast_2d(np.asarray(candidates, dtype=float))
        order = np.lexsort(cand.T[::-1])
        cand = cand[order]
        vals = _h_batch(p, t, x, pvec, list(cand.T))
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_u = float(vals[k]), cand[k]

    boxes, finites = [], []
    stack = [piece]
    while stack:
        ps = stack.pop()
        if isinstance(ps, UnionSet):
            stack.extend([ps.box, ps.finite])
        elif isinstance(ps, Box):
            boxes.append(ps)
        else:
            finites.append(ps)
    for fs in finites:
        consider(np.asarray(fs.points))
    for bx in boxes:
        if not all(np.isfinite(bx.lower)) or not all(np.isfinite(bx.upper)):
            raise ValueError("cannot maximize over an unbounded box")
        if sampling and "step" in sampling:
            axes = [np.arange(lo, hi + sampling["step"] / 2, sampling["step"])
                    for lo, hi in zip(bx.lower, bx.upper)]
            mesh = np.meshgrid(*axes, indexing="ij")
            consider(np.stack([mm.ravel() for mm in mesh], axis=1))
        else:
            consider(_box_lattice(bx, 32))
            u0 = best_u.copy()
            for j in range(len(bx.lower)):
                def score(v, j=j, u0=u0):
                    w = u0.copy()
                    w[j] = v
                    return hamiltonian(p, t, x, pvec, w)
                u0[j] = _golden_refine(score, bx.lower[j], bx.upper[j])
            consider(np.vstack([u0]))
    if len(extra):
        consider(np.atleast_2d(np.asarray(extra, dtype=float)))
    return best_val, best_u


# ---------------------------------------------------------------------------
# Costate integration
# ---------------------------------------------------------------------------

@dataclass
class Costate:
    """Left-continuous BV costate on the grid.

    ``values[k]`` stores p(t_k) as the limit from the left; ``atoms`` lists
    (node index, forward jump) pairs including the atom at T with jump
    Σ g_ix'(T) μᵢ({T}).
    """

    grid: Grid
    values: np.ndarray
    atoms: list = field(default_factory=list)

    def right_values(self):
        """p(t_k⁺): node values seen by the interval to the right."""
        out = self.values.copy()
        for k, jump in self.atoms:
            if k < self.grid.N:
                out[k] = out[k] + jump
        return out

    def midpoint_values(self):
        """p at interval midpoints (piecewise-smooth segment averages)."""
        rv = self.right_values()
        return 0.5 * (rv[:-1] + self.values[1:])

    def sup_norm(self):
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def total_variation(self):
        tv = float(np.sum(np.linalg.norm(np.diff(self.values, axis=0), axis=1)))
        tv += float(sum(np.linalg.norm(j) for _, j in self.atoms))
        return tv


def _gamma(p, i, t, x):
    return p.g_gradient(i, t, list(x))


def _measures_array(p, grid, measures):
    mu = np.zeros((p.s, grid.N + 1))
    if measures is None:
        return mu
    measures = np.asarray(measures, dtype=float)
    if measures.shape != mu.shape:
        raise ValueError(f"measures must have shape {(p.s, grid.N + 1)}")
    if np.any(measures < -1e-14):
        raise ValueError("state-constraint measures must be nonnegative")
    return np.maximum(measures, 0.0)


def integrate_adjoint(p, base, w_T, measures=None):
    """Backward adjoint integration with state-constraint measure atoms.

    The terminal condition is p(T) = −w_T − Σ g_ix'(T, x̄(T)) μᵢ({T}); the
    absolutely continuous part solves ṗ = −H_x'(t, x̄, p, ū) by backward RK4
    and each interior atom makes p jump by −g_ix'(tₙ)μᵢ({tₙ}) crossing tₙ
    leftward.  Left-continuity of the stored node values is by construction.
    """
    grid = base.grid
    mu = _measures_array(p, grid, measures)
    t = grid.times
    values = np.empty((grid.N + 1, p.n))
    atoms = []
    pT = -np.asarray(w_T, dtype=float)
    jump_T = np.zeros(p.n)
    for i in range(p.s):
        if mu[i, grid.N]:
            jump_T += _gamma(p, i, t[-1], base.x[-1]) * mu[i, grid.N]
    if np.any(jump_T):
        atoms.append((grid.N, jump_T.copy()))
    pT = pT - jump_T
    values[grid.N] = pT
    for k in range(grid.N - 1, -1, -1):
        uk = base.u[k]

        def rhs(s, q):
            A, _ = p.f_jacobians(s, list(base.x_at(s)), list(uk))
            return -(A.T @ q)

        pk = _rk4_step(rhs, t[k + 1], values[k + 1], t[k] - t[k + 1])
        jump = np.zeros(p.n)
        for i in range(p.s):
            if mu[i, k]:
                jump += _gamma(p, i, t[k], base.x[k]) * mu[i, k]
        if np.any(jump):
            atoms.append((k, jump.copy()))
            pk = pk - jump
        values[k] = pk
    atoms.sort(key=lambda a: a[0])
    return Costate(grid, values, atoms)


def adjoint_forward_form(p, base, costate, measures=None):
    """Rebuild the costate by the forward form p(t) = w₀ − ∫₀ᵗ H_x' ds + ∫₀ᵗ γ dμ.

    The two adjoint representations are equivalent; this is the cross-check
    direction, integrating forward from p(0) and adding each interior atom as
    t passes it.  Returns node values (left-continuous convention).
    """
    grid = base.grid
    mu = _measures_array(p, grid, measures)
    t = grid.times
    values = np.empty_like(costate.values)
    values[0] = costate.values[0]
    current = values[0].copy()
    for k in range(grid.N):
        # the atom at t_k acts on (t_k, T]: add it before integrating onward
        jump = np.zeros(p.n)
        for i in range(p.s):
            if mu[i, k]:
                jump += _gamma(p, i, t[k], base.x[k]) * mu[i, k]
        current = current + jump
        uk = base.u[k]

        def rhs(s, q):
            A, _ = p.f_jacobians(s, list(base.x_at(s)), list(uk))
            return -(A.T @ q)

        current = _rk4_step(rhs, t[k], current, t[k + 1] - t[k])
        values[k + 1] = current
    return values


# ---------------------------------------------------------------------------
# Multiplier tuples
# ---------------------------------------------------------------------------

@dataclass
class MultiplierTuple:
    lambdas: np.ndarray     # (r+1,); entries 0..l are ≥ 0
    measures: np.ndarray    # (s, N+1) nonnegative node weights
    costate: Costate

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.measures = np.atleast_2d(np.asarray(self.measures, dtype=float)) \
            if np.size(self.measures) else np.zeros((0, self.costate.grid.N + 1))

    def normalization(self, l):
        lam = self.lambdas
        return float(np.sum(lam[:l + 1]) + np.sum(np.abs(lam[l + 1:]))
                     + np.sum(self.measures))

    def scaled(self, c):
        cost = Costate(self.costate.grid, c * self.costate.values,
                       [(k, c * j) for k, j in self.costate.atoms])
        return MultiplierTuple(c * self.lambdas, c * self.measures, cost)

    def to_dict(self):
        return {
            "lambdas": [float(v) for v in self.lambdas],
            "measures": [
                {"constraint": i,
                 "nodes": [int(k) for k in np.nonzero(self.measures[i])[0]],
                 "weights": [float(w) for w in
                             self.measures[i][np.nonzero(self.measures[i])[0]]]}
                for i in range(self.measures.shape[0])
            ],
            "costate": {
                "values": [[float(v) for v in row] for row in self.costate.values],
                "atoms": [{"node": int(k), "jump": [float(v) for v in j]}
                          for k, j in self.costate.atoms],
            },
        }


def _terminal_wT(p, base, lambdas):
    wT = np.zeros(p.n)
    for j in range(p.r + 1):
        if lambdas[j]:
            wT += lambdas[j] * p.ell_gradient(j, base.x[0], base.x[-1])[p.n:]
    return wT


def costate_from_multipliers(p, base, lambdas, measures=None):
    return integrate_adjoint(p, base, _terminal_wT(p, base, lambdas), measures)


# ---------------------------------------------------------------------------
# Comparison families and the extraction LP
# ---------------------------------------------------------------------------

def _lattice_for_piece(piece, points_per_axis=9):
    if isinstance(piece, FiniteSet):
        return np.asarray(piece.points, dtype=float)
    if isinstance(piece, Box):
        return _box_lattice(piece, points_per_axis)
    if isinstance(piece, UnionSet):
        return np.vstack([_box_lattice(piece.box, points_per_axis),
                          np.asarray(piece.finite.points, dtype=float)])
    raise TypeError(f"not a control set: {piece!r}")


def comparison_family(p, grid, points_per_axis=9):
    """Per-interval lattice values realizing the pointwise MP at grid scale.

    Returns a list of (interval index, control value) pairs: each pair stands
    for the comparison control equal to ū except on that single interval.
    """
    out = []
    mids = grid.midpoints
    if isinstance(p.U, Schedule):
        for k in range(grid.N):
            for v in _lattice_for_piece(control_set_at(p.U, mids[k]), points_per_axis):
                out.append((k, np.asarray(v, dtype=float)))
    else:
        lattice = _lattice_for_piece(p.U, points_per_axis)
        for k in range(grid.N):
            for v in lattice:
                out.append((k, np.asarray(v, dtype=float)))
    return out


class _AdjointBasis:
    """Affine map (λ, μ-atoms) → costate, via the backward transition matrix."""

    def __init__(self, p, base):
        self.p = p
        self.base = base
        grid = base.grid
        t = grid.times
        M = np.empty((grid.N + 1, p.n, p.n))
        M[grid.N] = np.eye(p.n)
        for k in range(grid.N - 1, -1, -1):
            uk = base.u[k]

            def rhs(s, Q):
                A, _ = p.f_jacobians(s, list(base.x_at(s)), list(uk))
                return -(A.T @ Q)

            M[k] = _rk4_step(rhs, t[k + 1], M[k + 1], t[k] - t[k + 1])
        self.M = M

    def terminal_response(self, pT):
        """Node values of the measure-free costate with p(T) = pT."""
        return np.einsum("kij,j->ki", self.M, pT)

    def atom_response(self, i, k):
        """Node values of the costate response to a unit atom of μᵢ at node k."""
        grid = self.base.grid
        gam = _gamma(self.p, i, grid.times[k], self.base.x[k])
        vals = np.zeros((grid.N + 1, self.p.n))
        if k == grid.N:
            return self.terminal_response(-gam)
        seed = np.linalg.solve(self.M[k], -gam)
        vals[:k + 1] = np.einsum("lij,j->li", self.M[:k + 1], seed)
        return vals


def _interval_means(values, atom_node=None):
    """Midpoint costate per interval; the response vanishes right of its atom."""
    mids = 0.5 * (values[:-1] + values[1:])
    if atom_node is not None:
        mids[atom_node:] = 0.0
        if atom_node >= 1:
            mids[atom_node - 1] = 0.5 * (values[atom_node - 1] + values[atom_node])
    return mids


@dataclass
class ExtractResult:
    tuple: MultiplierTuple | None
    status: str                      # "feasible" | "infeasible" | "degenerate"
    phase1_violation: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def _assemble_lp(p, base, u_samples, tol_active, basis=None, restrict_h12=False):
    """Rows of the multiplier polytope in split coordinates.

    Unknown order: λ₀..λ_l, (λ⁺_j, λ⁻_j) for j = l+1..r, then active μ-atoms.
    Returns (A_eq, b_eq, A_ub, b_ub, meta) with all unknowns ≥ 0 and the MP
    inequalities expressed as A_ub·x ≤ 0.
    """
    grid = base.grid
    n, r, l, s = p.n, p.r, p.l, p.s
    basis = basis or _AdjointBasis(p, base)
    ell_vals = p.ell_values(base.x[0], base.x[-1])
    g_nodes = p.g_values(grid.times, list(base.x.T)) if s else np.zeros((0, grid.N + 1))
    g_scale = 1.0 + (float(np.max(np.abs(g_nodes))) if s else 0.0)
    active = [(i, k) for i in range(s) for k in range(grid.N + 1)
              if g_nodes[i, k] >= -tol_active * g_scale]

    n_lam = (l + 1) + 2 * (r - l)
    nvar = n_lam + len(active)

    def lam_cols(j):
        """(column, sign) pairs expressing λ_j."""
        if j <= l:
            return [(j, 1.0)]
        base_col = (l + 1) + 2 * (j - l - 1)
        return [(base_col, 1.0), (base_col + 1, -1.0)]

    # costate node values per unit of each unknown
    unit_costates = np.zeros((nvar, grid.N + 1, n))
    atom_nodes = [None] * nvar
    for j in range(r + 1):
        pT = -p.ell_gradient(j, base.x[0], base.x[-1])[n:]
        resp = basis.terminal_response(pT)
        for col, sign in lam_cols(j):
            unit_costates[col] += sign * resp
    for idx, (i, k) in enumerate(active):
        col = n_lam + idx
        unit_costates[col] = basis.atom_response(i, k)
        if k < grid.N:
            atom_nodes[col] = k

    A_eq_rows, b_eq = [], []
    # normalization
    row = np.zeros(nvar)
    row[:n_lam] = 1.0
    row[n_lam:] = 1.0
    if restrict_h12:
        row[:l + 1] = 0.0
        row[n_lam:] = 0.0
    A_eq_rows.append(row)
    b_eq.append(1.0)
    # H12 restriction / slackness pins
    if restrict_h12:
        for j in range(l + 1):
            row = np.zeros(nvar)
            row[j] = 1.0
            A_eq_rows.append(row)
            b_eq.append(0.0)
        for c in range(n_lam, nvar):
            row = np.zeros(nvar)
            row[c] = 1.0
            A_eq_rows.append(row)
            b_eq.append(0.0)
    else:
        for j in range(1, l + 1):
            if ell_vals[j] < -tol_active * (1.0 + abs(float(ell_vals[j]))):
                row = np.zeros(nvar)
                row[j] = 1.0
                A_eq_rows.append(row)
                b_eq.append(0.0)
    # transversality at t = 0: p(0) − Σ λ_j ∂ℓ_j/∂x(0) = 0
    for comp in range(n):
        row = np.zeros(nvar)
        for c in range(nvar):
            row[c] = unit_costates[c][0, comp]
        for j in range(r + 1):
            g0 = p.ell_gradient(j, base.x[0], base.x[-1])[:n]
            for col, sign in lam_cols(j):
                row[col] -= sign * g0[comp]
        A_eq_rows.append(row)
        b_eq.append(0.0)

    # integral MP rows over the comparison family
    mids_t = grid.midpoints
    xm = 0.5 * (base.x[:-1] + base.x[1:])
    f_base = p.f_vector(mids_t, list(xm.T), list(base.u.T)).T      # (N, n)
    p_mids = np.stack([_interval_means(unit_costates[c], atom_nodes[c])
                       for c in range(nvar)])                      # (nvar, N, n)
    A_ub_rows = []
    if u_samples is None:
        fam = comparison_family(p, grid)
        for k, v in fam:
            df = f_base[k] - p.f_vector(mids_t[k], list(xm[k]), list(v))
            coeffs = p_mids[:, k, :] @ df * grid.steps[k]
            A_ub_rows.append(-coeffs)       # ⟨p, f̄ − f(v)⟩Δt ≥ 0
    else:
        for uc in u_samples:
            uc = np.atleast_2d(np.asarray(uc, dtype=float))
            f_c = p.f_vector(mids_t, list(xm.T), list(uc.T)).T
            df = (f_base - f_c) * grid.steps[:, None]
            coeffs = np.einsum("ckn,kn->c", p_mids, df)
            A_ub_rows.append(-coeffs)

    meta = {"active": active, "n_lam": n_lam, "lam_cols": lam_cols,
            "unit_costates": unit_costates, "nvar": nvar}
    return (np.array(A_eq_rows), np.array(b_eq),
            np.array(A_ub_rows) if A_ub_rows else np.zeros((0, nvar)),
            np.zeros(len(A_ub_rows)), meta)


def _phase1(A_eq, b_eq, A_ub, b_ub):
    """Elastic feasibility: minimal total constraint violation."""
    neq, nub = A_eq.shape[0], A_ub.shape[0]
    nvar = A_eq.shape[1]
    c = np.concatenate([np.zeros(nvar), np.ones(2 * neq + nub)])
    A_eq_e = np.hstack([A_eq, np.eye(neq), -np.eye(neq), np.zeros((neq, nub))])
    A_ub_e = np.hstack([A_ub, np.zeros((nub, 2 * neq)), -np.eye(nub)])
    sol = linprog(c, A_eq=A_eq_e, b_eq=b_eq, A_ub=A_ub_e, b_ub=b_ub,
                  bounds=[(0, None)] * (nvar + 2 * neq + nub), method="highs")
    if not sol.success:
        return np.inf, None
    return float(sol.fun), sol.x[:nvar]


def _lex_min(A_eq, b_eq, A_ub, b_ub, split_cols, nvar, feas_tol=1e-9):
    """Canonical vertex: minimize split inflation, then lexicographic."""
    bounds = [(0, None)] * nvar

    def solve(c, extra_ub=(), extra_bub=()):
        Au = A_ub if not len(extra_ub) else np.vstack([A_ub, extra_ub])
        bu = b_ub if not len(extra_bub) else np.concatenate([b_ub, extra_bub])
        return linprog(c, A_eq=A_eq, b_eq=b_eq, A_ub=Au, b_ub=bu,
                       bounds=bounds, method="highs")

    c_split = np.zeros(nvar)
    c_split[split_cols] = 1.0
    sol = solve(c_split)
    if not sol.success:
        return None
    pins_A, pins_b = [c_split], [float(sol.fun) + feas_tol]
    for i in range(nvar):
        c = np.zeros(nvar)
        c[i] = 1.0
        sol = solve(c, np.array(pins_A), np.array(pins_b))
        if not sol.success:
            break
        row = np.zeros(nvar)
        row[i] = 1.0
        pins_A.append(row)
        pins_b.append(float(sol.fun) + feas_tol)
    return sol.x[:nvar] if sol.success else None


def _vector_to_tuple(p, base, vec, meta):
    n_lam, active = meta["n_lam"], meta["active"]
    lambdas = np.zeros(p.r + 1)
    for j in range(p.r + 1):
        for col, sign in meta["lam_cols"](j):
            lambdas[j] += sign * vec[col]
    measures = np.zeros((p.s, base.grid.N + 1))
    for idx, (i, k) in enumerate(active):
        measures[i, k] = vec[n_lam + idx]
    tup = MultiplierTuple(lambdas, measures,
                          costate_from_multipliers(p, base, lambdas, measures))
    norm = tup.normalization(p.l)
    if norm <= 1e-12:
        return None
    return tup.scaled(1.0 / norm)


def extract_multipliers(p, base, u_samples=None, tol=1e-9, tol_active=1e-6):
    """Solve the multiplier feasibility LP along a candidate process.

    ``u_samples`` is an optional list of explicit comparison controls (one
    (N, m) array each); by default the per-interval lattice family is used.
    Returns an :class:`ExtractResult` whose tuple (when feasible) is the
    canonical vertex rescaled to normalization 1.
    """
    A_eq, b_eq, A_ub, b_ub, meta = _assemble_lp(p, base, u_samples, tol_active)
    viol, _ = _phase1(A_eq, b_eq, A_ub, b_ub)
    if not np.isfinite(viol) or viol > max(tol, 1e-8):
        return ExtractResult(None, "infeasible", viol,
                             {"reason": "phase-1 violation above tolerance"})
    split_cols = list(range(p.l + 1, meta["n_lam"]))
    vec = _lex_min(A_eq, b_eq, A_ub, b_ub, split_cols, meta["nvar"])
    if vec is None:
        return ExtractResult(None, "infeasible", viol,
                             {"reason": "lexicographic solve failed"})
    tup = _vector_to_tuple(p, base, vec, meta)
    if tup is None:
        return ExtractResult(None, "degenerate", viol,
                             {"reason": "normalization collapsed to zero"})
    return ExtractResult(tup, "feasible", viol, {"active_atoms": meta["active"]})


def nonsingularity_h12(p, base, u_samples=None, tol=1e-8, tol_active=1e-6):
    """Check hypothesis (H12): no nontrivial multiplier with only
    endpoint-equality λ's (λ₀..λ_l = 0, μ = 0) satisfies the MP relations.
    Returns True when the restricted polytope is empty."""
    A_eq, b_eq, A_ub, b_ub, meta = _assemble_lp(p, base, u_samples, tol_active,
                                                restrict_h12=True)
    viol, _ = _phase1(A_eq, b_eq, A_ub, b_ub)
    return viol > tol


# ---------------------------------------------------------------------------
# Maximum-principle residual report
# ---------------------------------------------------------------------------

@dataclass
class MPReport:
    transversality: float
    adjoint: float
    hamiltonian_gap: float
    slackness: float
    support: float
    normalization: float
    nontriviality: float
    verdict: bool

    def residuals(self):
        return {
            "transversality": self.transversality,
            "adjoint": self.adjoint,
            "hamiltonian_gap": self.hamiltonian_gap,
            "slackness": self.slackness,
            "support": self.support,
        }


def mp_residuals(p, base, mult, sampling=None, tol=1e-8, tol_active=1e-6,
                 tol_nontrivial=1e-8):
    """Evaluate every maximum-principle relation along the candidate.

    The adjoint defect recomputes the costate from the tuple's terminal data
    and measures and compares node values; the Hamiltonian gap is the sup of
    Ĥ − H(ū) over nodes (ū is always among the sup candidates, so the gap is
    nonnegative).  All residuals are degree-1 homogeneous in the tuple; the
    verdict is evaluated after normalization and is scale-invariant.
    """
    grid = base.grid
    lam = mult.lambdas
    t = grid.times
    # transversality
    wT = _terminal_wT(p, base, lam)
    w0 = np.zeros(p.n)
    for j in range(p.r + 1):
        if lam[j]:
            w0 += lam[j] * p.ell_gradient(j, base.x[0], base.x[-1])[:p.n]
    jump_T = np.zeros(p.n)
    for i in range(p.s):
        if mult.measures.shape[0] and mult.measures[i, grid.N]:
            jump_T += _gamma(p, i, t[-1], base.x[-1]) * mult.measures[i, grid.N]
    r_trans = float(np.linalg.norm(np.concatenate([
        mult.costate.values[0] - w0,
        mult.costate.values[-1] + jump_T + wT,
    ])))
    # adjoint defect
    recomputed = integrate_adjoint(p, base, wT, mult.measures if p.s else None)
    r_adj = float(np.max(np.linalg.norm(recomputed.values - mult.costate.values,
                                        axis=1)))
    # Hamiltonian gap at nodes
    gap = 0.0
    for k in range(grid.N + 1):
        uk = base.u[min(k, grid.N - 1)]
        pk = mult.costate.values[k]
        h_here = hamiltonian(p, t[k], base.x[k], pk, uk)
        h_sup, _ = hamiltonian_sup(p, t[k], base.x[k], pk, sampling,
                                   extra=[uk])
        gap = max(gap, h_sup - h_here)
    # slackness and support
    ell_vals = p.ell_values(base.x[0], base.x[-1])
    r_slack = max([abs(lam[j] * float(ell_vals[j])) for j in range(1, p.l + 1)],
                  default=0.0)
    r_support = 0.0
    if p.s:
        g_nodes = p.g_values(t, list(base.x.T))
        g_scale = 1.0 + float(np.max(np.abs(g_nodes)))
        mask = g_nodes < -tol_active * g_scale
        r_support = float(np.sum(mult.measures[mask]))
    norm = mult.normalization(p.l)
    nontrivial = norm + mult.costate.sup_norm()
    scale = 1.0 / norm if norm > 0 else 1.0
    worst = max(r_trans, r_adj, gap, r_slack, r_support)
    verdict = (worst * scale <= tol) and (nontrivial > tol_nontrivial)
    return MPReport(r_trans, r_adj, float(gap), r_slack, r_support,
                    norm, float(nontrivial), bool(verdict))


# ---------------------------------------------------------------------------
# Finite Bolza stationarity checker
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BolzaModel:
    """Data of the basic unconstrained model: ∫‖ẋ − ψ₀ − Σαᵢψᵢ‖dt + off-integral term.

    ``psi0`` and each element of ``psis`` are tuples of n expressions in (t, x).
    """

    n: int
    psi0: tuple
    psis: tuple = ()


@dataclass
class BolzaReport:
    stationarity: float      # Eq-(5)-style sup residual over interior nodes
    balance: float           # Eq-(6) total-mass residual
    alpha_inequalities: tuple  # Eq-(3) violations per ψᵢ
    q_consistency: float     # q(t) vs ∇ₓ⟨p, ψ₀⟩ for smooth data
    endpoint: float          # |p(0) − ν({0})|
    p_bound: float           # max(0, ‖p‖∞ − 1)

    @property
    def max_residual(self):
        return max(self.stationarity, self.balance, self.endpoint,
                   self.q_consistency, self.p_bound,
                   max(self.alpha_inequalities, default=0.0))


def _psi_vec(exprs, t, x):
    from .expr import evaluate
    return np.array([evaluate(e, t, list(x), []) for e in exprs])


def bolza_stationarity_check(model, grid, x_nodes, nu, pfun, q):
    """Check the first-order relations of the basic Bolza model.

    ``nu`` is a discrete vector measure as (N+1, n) node weights, ``pfun``
    and ``q`` are (N+1, n) grid samples.  The stationarity relation
    p(t) + ∫_{[t,T]} ν(ds) − ∫_t^T q ds = 0 is checked at interior nodes
    (the 0-atom of ν pairs with p(0) in the endpoint relation instead), the
    balance relation compares total masses, and q is compared against
    ∇ₓ⟨p(t), ψ₀(t, ·)⟩ which is its unique admissible value for smooth data.
    """
    from .expr import grad as expr_grad
    x_nodes = np.atleast_2d(np.asarray(x_nodes, dtype=float))
    nu = np.atleast_2d(np.asarray(nu, dtype=float))
    pfun = np.atleast_2d(np.asarray(pfun, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    t = grid.times
    steps = grid.steps
    # ∫_t^T q ds by trapezoid, cumulative from the right
    seg = 0.5 * (q[:-1] + q[1:]) * steps[:, None]
    q_tail = np.vstack([np.cumsum(seg[::-1], axis=0)[::-1], np.zeros(model.n)])
    nu_tail = np.cumsum(nu[::-1], axis=0)[::-1]
    stat = 0.0
    for k in range(1, grid.N + 1):
        stat = max(stat, float(np.linalg.norm(pfun[k] + nu_tail[k] - q_tail[k])))
    balance = float(np.linalg.norm(nu.sum(axis=0) - seg.sum(axis=0)))
    endpoint = float(np.linalg.norm(pfun[0] - nu[0]))
    ineqs = []
    for psis in model.psis:
        vals = np.array([np.dot(pfun[k], _psi_vec(psis, t[k], x_nodes[k]))
                         for k in range(grid.N + 1)])
        total = float(np.sum(0.5 * (vals[:-1] + vals[1:]) * steps))
        ineqs.append(max(0.0, total))
    qc = 0.0
    for k in range(grid.N + 1):
        gsum = np.zeros(model.n)
        for i, e in enumerate(model.psi0):
            gx, _ = expr_grad(e, t[k], list(x_nodes[k]), [])
            gsum += pfun[k, i] * gx
        qc = max(qc, float(np.linalg.norm(q[k] - gsum)))
    p_bound = max(0.0, float(np.max(np.linalg.norm(pfun, axis=1))) - 1.0)
    return BolzaReport(stat, balance, tuple(ineqs), qc, endpoint, p_bound)
