import numpy as np
import pytest

from pontrylab.expr import parse_expr
from pontrylab.penalty import (
    DecisionVector, PenaltyConfig, PenaltyFunctional, J_k, endpoint_distance,
    functional_value, minimize_functional, optimality_alternative_drive, psi,
    _smoothed_value_grad,
)
from pontrylab.problem import Box, ProblemSpec, build_catalog_problem
from pontrylab.trajectory import ControlProcess, Grid, integrate_forward


def lq_candidate(N=60):
    p = build_catalog_problem("lq-scalar")
    grid = Grid.uniform(N, 1.0)
    proc = integrate_forward(p, [0.0], np.full((N, 1), -1.0), grid)
    return p, grid, proc


def test_psi_cases():
    p = build_catalog_problem("example-5-1")
    grid = Grid.uniform(20, 1.0)
    cand = integrate_forward(p, [0.0, 0.0], np.zeros((20, 1)), grid)
    ref = float(p.ell_values(cand.x[0], cand.x[-1])[0])
    assert psi(p, cand, ref) == 0.0

    # active state constraint at the reference: ψ = 0; lower cost: ψ < 0
    q = ProblemSpec(n=1, m=1, T=1.0, f=(parse_expr("u1", 1, 1),),
                    U=Box((-1.0,), (1.0,)), g=(parse_expr("x1 - 1", 1, 0),),
                    ell=(parse_expr("x2", 2, 0),))
    proc = ControlProcess(grid, np.ones((21, 1)), np.zeros((20, 1)))
    assert psi(q, proc, ell_ref=1.0) == 0.0
    lower = ControlProcess(grid, np.full((21, 1), 0.5), np.zeros((20, 1)))
    assert psi(q, lower, ell_ref=1.0) < 0.0


def test_endpoint_distance_cases():
    p = build_catalog_problem("lq-scalar")  # single equality x(0) = 0
    grid = Grid.uniform(10, 1.0)
    ok = ControlProcess(grid, np.zeros((11, 1)), np.zeros((10, 1)))
    assert endpoint_distance(p, ok) == 0.0
    off = ControlProcess(grid, np.full((11, 1), 0.3), np.zeros((10, 1)))
    assert endpoint_distance(p, off) == pytest.approx(0.3)

    # inactive inequality ℓ₁ = x(0) − 5 = −5 contributes nothing
    q = ProblemSpec(n=1, m=1, T=1.0, f=(parse_expr("u1", 1, 1),),
                    U=Box((-1.0,), (1.0,)),
                    ell=(parse_expr("x2", 2, 0), parse_expr("x1 - 5", 2, 0)), l=1)
    inactive = ControlProcess(grid, np.zeros((11, 1)), np.zeros((10, 1)))
    assert endpoint_distance(q, inactive) == 0.0
    active = ControlProcess(grid, np.full((11, 1), 6.0), np.zeros((10, 1)))
    assert endpoint_distance(q, active) == pytest.approx(1.0)


def test_J_k_cases():
    p, grid, proc = lq_candidate(40)
    z = DecisionVector.from_process(proc)
    assert J_k(p, z, (), grid) <= 1e-14

    z_bad = DecisionVector(np.zeros((41, 1)), np.ones((40, 1)), np.zeros(0))
    assert J_k(p, z_bad, (), grid) == pytest.approx(1.0)

    # relaxed solution with α = 1/2 between u ≡ 0 and u₁ ≡ 1
    x = 0.5 * grid.times[:, None]
    z_rel = DecisionVector(x, np.zeros((40, 1)), np.array([0.5]))
    assert J_k(p, z_rel, (np.ones((40, 1)),), grid) <= 1e-14


def test_functional_value_at_optimum_and_anchor():
    p, grid, proc = lq_candidate(30)
    ell_ref = float(p.ell_values(proc.x[0], proc.x[-1])[0])
    F = PenaltyFunctional(p, grid, lam=1.0, ell_ref=ell_ref, tube_center=proc)
    assert functional_value(F, DecisionVector.from_process(proc)) == pytest.approx(0.0, abs=1e-13)

    # Ekeland mode at its own anchor: only λψₘ + d survive
    anchor = ControlProcess(grid, np.full((31, 1), 0.2), np.zeros((30, 1)))
    Fm = PenaltyFunctional(p, grid, lam=0.7, ell_ref=ell_ref, mode="ekeland",
                           m=10, anchor=anchor, tube_center=anchor)
    val = functional_value(Fm, DecisionVector.from_process(anchor))
    expected = 0.7 * psi(p, anchor, ell_ref, shift=1e-2) + endpoint_distance(p, anchor)
    assert val == pytest.approx(expected, abs=1e-13)


def test_functional_detects_descent_direction():
    # feasible-dynamics process with u = 3/4 on [0, ε]: 𝒥 = λ·x₂(1) < 0
    p = build_catalog_problem("example-5-1")
    grid = Grid.uniform(200, 1.0)
    u = np.zeros((200, 1))
    u[grid.midpoints < 0.1] = 0.75
    proc = integrate_forward(p, [0.0, 0.0], u, grid)
    F = PenaltyFunctional(p, grid, lam=1.0, ell_ref=0.0, tube_center=proc)
    val = functional_value(F, DecisionVector.from_process(proc))
    oracle = -0.75 * 0.1 ** 2 / 2   # forward-integration value of x₂(1)
    assert val == pytest.approx(oracle, rel=1e-6)


def test_smoothed_gradient_matches_finite_differences():
    p = ProblemSpec(
        n=2, m=1, T=1.0,
        f=(parse_expr("u1", 2, 1), parse_expr("x1*sin(2*pi*u1)", 2, 1)),
        U=Box((0.0,), (1.0,)),
        g=(parse_expr("x2 - 0.5", 2, 0),),
        ell=(parse_expr("x4", 4, 0), parse_expr("x1 - 0.05", 4, 0),
             parse_expr("x2", 4, 0)), l=1)
    N, k = 6, 2
    grid = Grid.uniform(N, 1.0)
    rng = np.random.default_rng(42)
    anchor = ControlProcess(grid, rng.uniform(-0.2, 0.2, (N + 1, 2)),
                            rng.uniform(0.1, 0.9, (N, 1)))
    refs = (rng.uniform(0.1, 0.9, (N, 1)), rng.uniform(0.1, 0.9, (N, 1)))
    for mode, m, anch in (("nonsingular", 0, None), ("ekeland", 7, anchor)):
        F = PenaltyFunctional(p, grid, u_refs=refs, lam=0.8, K=1.3, ell_ref=0.1,
                              mode=mode, m=m, anchor=anch, tube_center=anchor)
        z = DecisionVector(rng.uniform(-0.2, 0.2, (N + 1, 2)),
                           rng.uniform(0.1, 0.9, (N, 1)),
                           np.array([0.2, 0.3]))
        for eps in (1e-1, 1e-3):
            val, g = _smoothed_value_grad(F, z, eps)
            v = z.pack()
            fd = np.empty_like(v)
            h = 1e-7
            for i in range(v.size):
                vp, vm = v.copy(), v.copy()
                vp[i] += h
                vm[i] -= h
                zp = DecisionVector.unpack(vp, z.x.shape, z.u.shape, k)
                zm = DecisionVector.unpack(vm, z.x.shape, z.u.shape, k)
                fd[i] = (_smoothed_value_grad(F, zp, eps)[0]
                         - _smoothed_value_grad(F, zm, eps)[0]) / (2 * h)
            assert np.linalg.norm(g - fd) <= 2e-5 * (1 + np.linalg.norm(g)), (mode, eps)


def test_minimize_stays_at_optimum():
    p, grid, proc = lq_candidate(50)
    ell_ref = float(p.ell_values(proc.x[0], proc.x[-1])[0])
    F = PenaltyFunctional(p, grid, lam=0.5, ell_ref=ell_ref, tube_center=proc)
    cfg = PenaltyConfig(eps0=1.5, delta0=None, seed=1)
    z_star, trace = minimize_functional(F, DecisionVector.from_process(proc), cfg)
    assert functional_value(F, z_star) <= 1e-10
    assert functional_value(F, z_star) >= -1e-10
    assert trace.stages[-1][3] <= trace.stages[0][3] + 1e-9


def test_minimize_recovers_lq_optimum():
    # descend from the zero process to u* ≡ −1 (brute-force oracle optimum)
    p = build_catalog_problem("lq-scalar")
    N = 60
    grid = Grid.uniform(N, 1.0)
    zero = ControlProcess(grid, np.zeros((N + 1, 1)), np.zeros((N, 1)))
    F = PenaltyFunctional(p, grid, lam=0.5, ell_ref=0.0, tube_center=zero)
    cfg = PenaltyConfig(eps0=1.5, delta0=None, seed=2, max_iters=600)
    z_star, _ = minimize_functional(F, DecisionVector.from_process(zero), cfg)
    # brute force over constant controls u ∈ {−1, −0.99, …, 1}
    best_u, best_cost = None, np.inf
    for uc in np.round(np.arange(-1.0, 1.0 + 1e-9, 0.01), 2):
        proc = integrate_forward(p, [0.0], np.full((N, 1), uc), grid)
        cost = float(p.ell_values(proc.x[0], proc.x[-1])[0])
        if cost < best_cost:
            best_u, best_cost = uc, cost
    assert best_u == -1.0 and best_cost == pytest.approx(-1.0)
    l1_err = float(np.sum(np.abs(z_star.u + 1.0) * grid.steps[:, None]))
    cost_star = float(p.ell_values(z_star.x[0], z_star.x[-1])[0])
    assert l1_err <= 1e-3
    assert abs(cost_star - best_cost) <= 1e-3


def test_minimize_lambda_zero_feasible_anchor():
    p, grid, proc = lq_candidate(40)
    F = PenaltyFunctional(p, grid, lam=0.0, ell_ref=-1.0, tube_center=proc)
    z0 = DecisionVector.from_process(proc)
    assert functional_value(F, z0) <= 1e-13
    z_star, _ = minimize_functional(F, z0, PenaltyConfig(seed=3))
    assert functional_value(F, z_star) <= 1e-10


def test_alternative_example_5_1_nonsingular():
    p = build_catalog_problem("example-5-1")
    grid = Grid.uniform(80, 1.0)
    cand = integrate_forward(p, [0.0, 0.0], np.zeros((80, 1)), grid)
    res = optimality_alternative_drive(p, cand, cfg=PenaltyConfig(seed=4, max_iters=200))
    assert res.kind == "nonsingular"
    assert res.lam == 1.0


def test_alternative_unreachable_endpoint_singular():
    # ẋ = 0 with endpoint equality x(T) = 1, candidate x ≡ 0: no feasible
    # point in the tube, so the Ekeland sequence stays infeasible
    p = ProblemSpec(n=1, m=1, T=1.0, f=(parse_expr("0", 1, 1),),
                    U=Box((-1.0,), (1.0,)),
                    ell=(parse_expr("0", 2, 0), parse_expr("x2 - 1", 2, 0)))
    grid = Grid.uniform(20, 1.0)
    cand = ControlProcess(grid, np.zeros((21, 1)), np.zeros((20, 1)))
    res = optimality_alternative_drive(p, cand, cfg=PenaltyConfig(seed=5, max_iters=200))
    assert res.kind == "singular"
    assert len(res.sequence) == 3
    for _, z in res.sequence:
        proc = z.to_process(grid)
        assert endpoint_distance(p, proc) > 1e-6
        assert J_k(p, z, (), grid) <= 1e-6


def test_alternative_unconstrained_problem_nonsingular():
    # no constraints at all (r = 0, s = 0) at a true unconstrained minimum
    p = ProblemSpec(n=1, m=1, T=1.0, f=(parse_expr("u1", 1, 1),),
                    U=Box((-1.0,), (1.0,)), ell=(parse_expr("x2^2", 2, 0),))
    grid = Grid.uniform(30, 1.0)
    cand = ControlProcess(grid, np.zeros((31, 1)), np.zeros((30, 1)))
    res = optimality_alternative_drive(p, cand, cfg=PenaltyConfig(seed=6, max_iters=200))
    assert res.kind == "nonsingular" and res.lam == 1.0
