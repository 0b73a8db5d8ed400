import numpy as np
import pytest

from pontrylab.expr import Piecewise, evaluate, parse_expr
from pontrylab.problem import (
    Box, FiniteSet, Schedule, UnionSet, CATALOG, ProblemSpec,
    augment_time_reparam, build_catalog_problem, contains,
    problem_from_dict, problem_to_dict, project_onto_U,
    second_tangent_contains, tangent_cone_contains,
    load_problem_file, save_problem_file,
)


def test_project_box():
    pt, d = project_onto_U(Box((0.0,), (1.0,)), 0.0, [1.5])
    assert pt == pytest.approx([1.0]) and d == pytest.approx(0.5)


def test_project_finite_set():
    U = FiniteSet(((0.0,), (0.75,)))
    pt, d = project_onto_U(U, 0.0, [0.5])
    assert pt == pytest.approx([0.75]) and d == pytest.approx(0.25)


def test_project_identity_and_union_tie():
    U = Box((0.0, -1.0), (1.0, 1.0))
    pt, d = project_onto_U(U, 0.0, [0.3, 0.4])
    assert d == 0.0 and pt == pytest.approx([0.3, 0.4])
    # equidistant between box face and a finite point: box branch wins
    W = UnionSet(Box((0.0,), (1.0,)), FiniteSet(((-2.0,),)))
    pt, d = project_onto_U(W, 0.0, [-1.0])
    assert pt == pytest.approx([0.0]) and d == pytest.approx(1.0)


def test_projection_distance_iff_membership():
    U = FiniteSet(((0.0, 1.0), (2.0, -1.0), (0.5, 0.5)))
    for p in U.points:
        assert project_onto_U(U, 0.0, p)[1] == 0.0
    assert project_onto_U(U, 0.0, [0.1, 1.0])[1] > 0.0
    B = Box((-1.0,), (1.0,))
    rng = np.random.default_rng(3)
    for _ in range(50):
        u = rng.uniform(-2, 2, size=1)
        inside = -1.0 <= u[0] <= 1.0
        assert (project_onto_U(B, 0.0, u)[1] == 0.0) == inside


def test_schedule_resolution():
    U = Schedule((0.5,), (Box((0.0,), (1.0,)), Box((2.0,), (3.0,))))
    assert contains(U, 0.2, [0.7])
    assert not contains(U, 0.7, [0.7])
    assert contains(U, 0.7, [2.5])


def test_tangent_cones_box():
    U = Box((0.0,), (1.0,))
    assert tangent_cone_contains(U, 0.0, [0.0], [1.0])
    assert not tangent_cone_contains(U, 0.0, [0.0], [-1.0])
    assert tangent_cone_contains(U, 0.0, [0.5], [-1.0])
    assert tangent_cone_contains(U, 0.0, [1.0], [-2.0])
    assert not tangent_cone_contains(U, 0.0, [1.0], [0.5])


def test_tangent_cone_finite_and_union():
    F = FiniteSet(((0.0,), (1.0,)))
    assert tangent_cone_contains(F, 0.0, [0.0], [0.0])
    assert not tangent_cone_contains(F, 0.0, [0.0], [0.1])
    W = UnionSet(Box((0.0,), (1.0,)), FiniteSet(((3.0,),)))
    assert tangent_cone_contains(W, 0.0, [0.0], [1.0])   # box branch governs
    assert not tangent_cone_contains(W, 0.0, [3.0], [1.0])  # isolated point


def test_second_tangent_box():
    U = Box((0.0,), (1.0,))
    ok, nonempty = second_tangent_contains(U, 0.0, [0.0], [1.0], [0.0])
    assert ok and nonempty
    ok, nonempty = second_tangent_contains(U, 0.0, [0.0], [0.0], [1.0])
    assert ok and nonempty
    ok, _ = second_tangent_contains(U, 0.0, [0.0], [0.0], [-1.0])
    assert not ok
    # strict inward tangent direction frees the second-order term
    ok, _ = second_tangent_contains(U, 0.0, [0.0], [1.0], [-5.0])
    assert ok


def test_second_tangent_finite():
    F = FiniteSet(((0.5,),))
    ok, nonempty = second_tangent_contains(F, 0.0, [0.5], [1.0], [0.0])
    assert not ok and not nonempty
    ok, nonempty = second_tangent_contains(F, 0.0, [0.5], [0.0], [0.0])
    assert ok and nonempty


def test_problem_validation():
    with pytest.raises(ValueError):
        ProblemSpec(n=2, m=1, T=1.0, f=(parse_expr("u1", 2, 1),),
                    U=Box((0.0,), (1.0,)), ell=(parse_expr("x1", 4, 0),))
    with pytest.raises(ValueError):
        ProblemSpec(n=1, m=1, T=1.0, f=(parse_expr("u1", 1, 1),),
                    U=Box((0.0,), (1.0,)), ell=(parse_expr("x1", 2, 0),), l=3)


def test_catalog_entries_round_trip():
    assert "example-5-1" in CATALOG and "lq-scalar" in CATALOG
    for name in CATALOG:
        p = build_catalog_problem(name)
        q = problem_from_dict(problem_to_dict(p))
        assert q == p, name


def test_problem_file_round_trip(tmp_path):
    p = build_catalog_problem("constrained-integrator")
    path = tmp_path / "prob.json"
    save_problem_file(p, path)
    assert load_problem_file(path) == p


def test_catalog_unknown_name():
    with pytest.raises(KeyError):
        build_catalog_problem("no-such-problem")


def test_example_dynamics_jacobians():
    p = build_catalog_problem("example-5-1")
    A, B = p.f_jacobians(0.0, [0.0, 0.0], [0.0])
    assert A == pytest.approx(np.zeros((2, 2)))
    assert B == pytest.approx(np.array([[1.0], [0.0]]))


def test_reparam_example():
    p = build_catalog_problem("example-5-1")
    N = 4
    q = augment_time_reparam(p, np.zeros((N, 1)))
    assert (q.n, q.m, q.T) == (3, 1, 1.0)
    assert q.r == p.r + 2 and q.l == p.l
    # dynamics at (y, t) = (0.3, 0, 0.2) with v = 1: (v·f(t,y,0), v) = (0, 0, 1)
    val = q.f_vector(0.2, [0.3, 0.0, 0.2], [1.0])
    assert val == pytest.approx([0.0, 0.0, 1.0], abs=1e-15)
    # endpoint block: t(0) = 0 and t(1) − T = 0 appended
    vals = q.ell_values([0.0, 0.0, 0.0], [0.5, -0.25, 1.0])
    assert vals[0] == pytest.approx(-0.25)   # cost x₂(T)
    assert vals[-2] == 0.0 and vals[-1] == 0.0


def test_reparam_piecewise_reference():
    p = build_catalog_problem("relax-demo")
    q = augment_time_reparam(p, np.array([[1.0], [2.0]]))
    assert isinstance(q.f[0].right, Piecewise)
    assert evaluate(q.f[0], 0.25, [0.0, 0.0], [1.0]) == 1.0
    assert evaluate(q.f[0], 0.75, [0.0, 0.0], [3.0]) == 6.0


def test_reparam_zero_dynamics():
    p = ProblemSpec(n=1, m=1, T=1.0, f=(parse_expr("0", 1, 1),),
                    U=Box((0.0,), (1.0,)), ell=(parse_expr("x2", 2, 0),))
    q = augment_time_reparam(p, np.zeros((2, 1)))
    assert q.f_vector(0.3, [1.0, 0.3], [2.0]) == pytest.approx([0.0, 2.0])


def test_reparam_rejects_schedule():
    U = Schedule((0.5,), (Box((0.0,), (1.0,)), Box((0.0,), (2.0,))))
    p = ProblemSpec(n=1, m=1, T=1.0, f=(parse_expr("u1", 1, 1),),
                    U=U, ell=(parse_expr("x2", 2, 0),))
    with pytest.raises(ValueError):
        augment_time_reparam(p, np.zeros((2, 1)))
