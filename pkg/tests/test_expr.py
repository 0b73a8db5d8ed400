import math

import numpy as np
import pytest

from pontrylab.expr import (
    Bin, Call, Const, DomainError, ExprSyntaxError, Neg, NondifferentiableError,
    Num, UnboundVariableError, Var, evaluate, grad, hessian, parse_expr,
    to_source,
)


def test_parse_example_dynamics():
    e = parse_expr("x1*sin(2*pi*u1)", n=2, m=1)
    assert e == Bin("*", Var("x", 1),
                    Call("sin", (Bin("*", Bin("*", Num(2), Const("pi")), Var("u", 1)),)))


def test_parse_constant_zero():
    assert parse_expr("0", n=1, m=1) == Num(0.0)


def test_parse_syntax_error_offset():
    with pytest.raises(ExprSyntaxError) as exc:
        parse_expr("x1 + * u1", n=2, m=1)
    assert exc.value.offset == 5


def test_parse_unbound_variable():
    with pytest.raises(UnboundVariableError):
        parse_expr("x3", n=2, m=1)
    with pytest.raises(UnboundVariableError):
        parse_expr("u2 + 1", n=2, m=1)


def test_parse_precedence():
    # ^ tighter than unary minus, right-assoc; unary minus tighter than */
    assert evaluate(parse_expr("-x1^2", 1, 0), 0.0, [3.0], []) == -9.0
    assert evaluate(parse_expr("2^3^2", 1, 0), 0.0, [0.0], []) == 512.0
    assert evaluate(parse_expr("2^-2", 1, 0), 0.0, [0.0], []) == 0.25
    assert evaluate(parse_expr("-x1*u1", 1, 1), 0.0, [2.0], [5.0]) == -10.0
    assert evaluate(parse_expr("1 - 2 - 3", 1, 0), 0.0, [0.0], []) == -4.0


def test_eval_example_dynamics_value():
    # x₁·sin(2πu) at x₁=0.3, u=1/4: 0.3·sin(π/2) = 0.3
    e = parse_expr("x1*sin(2*pi*u1)", n=2, m=1)
    assert evaluate(e, 0.5, [0.3, 0.0], [0.25]) == pytest.approx(0.3, abs=1e-15)


def test_eval_identity_and_domain_error():
    assert evaluate(parse_expr("u1", 1, 1), 0.0, [0.0], [7.0]) == 7.0
    with pytest.raises(DomainError):
        evaluate(parse_expr("log(x1)", 1, 0), 0.0, [0.0], [])
    with pytest.raises(DomainError):
        evaluate(parse_expr("1/x1", 1, 0), 0.0, [0.0], [])
    with pytest.raises(DomainError):
        evaluate(parse_expr("sqrt(x1)", 1, 0), 0.0, [-1.0], [])
    with pytest.raises(DomainError):
        evaluate(parse_expr("x1^0.5", 1, 0), 0.0, [-2.0], [])
    assert evaluate(parse_expr("x1^2", 1, 0), 0.0, [-2.0], []) == 4.0


def test_eval_batched_points():
    e = parse_expr("t*x1 + u1", n=1, m=1)
    t = np.array([0.0, 1.0, 2.0])
    out = evaluate(e, t, [np.array([1.0, 2.0, 3.0])], [np.array([5.0, 5.0, 5.0])])
    assert np.allclose(out, [5.0, 7.0, 11.0])


def test_grad_example_dynamics_at_origin():
    e = parse_expr("x1*sin(2*pi*u1)", n=2, m=1)
    gx, gu = grad(e, 0.0, [0.0, 0.0], [0.0])
    assert np.allclose(gx, [0.0, 0.0])
    assert np.allclose(gu, [0.0])


def test_grad_constant_and_bilinear():
    gx, gu = grad(parse_expr("3.5", 2, 1), 0.0, [1.0, 2.0], [3.0])
    assert np.allclose(gx, 0.0) and np.allclose(gu, 0.0)
    gx, gu = grad(parse_expr("x1*u1", 1, 1), 0.0, [2.0], [3.0])
    assert np.allclose(gx, [3.0]) and np.allclose(gu, [2.0])


def test_grad_nondifferentiable_tie():
    with pytest.raises(NondifferentiableError) as exc:
        grad(parse_expr("abs(x1)", 1, 0), 0.0, [0.0], [])
    lo, hi = exc.value.interval
    assert lo == -1.0 and hi == 1.0
    with pytest.raises(NondifferentiableError):
        grad(parse_expr("max2(x1, -x1)", 1, 0), 0.0, [0.0], [])


def test_hessian_bilinear_and_quadratic():
    H = hessian(parse_expr("x1*u1", 1, 1), 0.0, [0.7], [-0.3])
    assert H == pytest.approx(np.array([[0.0, 1.0], [1.0, 0.0]]), abs=1e-9)
    H = hessian(parse_expr("x1^2", 1, 0), 0.0, [1.3], [])
    assert H[0, 0] == pytest.approx(2.0, abs=1e-8)


def test_hessian_example_cross_term():
    # analytic oracle: ∂²(x₁ sin 2πu)/∂x₁∂u = 2π cos 2πu = 2π at u=0
    e = parse_expr("x1*sin(2*pi*u1)", n=2, m=1)
    H = hessian(e, 0.0, [0.0, 0.0], [0.0])
    assert H[0, 2] == pytest.approx(2 * math.pi, rel=1e-8)
    assert np.array_equal(H, H.T)


# ---------------------------------------------------------------------------
# random-tree properties
# ---------------------------------------------------------------------------

def random_tree(rng, n, m, depth):
    """Seeded random AST over the full grammar, depth-bounded."""
    if depth == 0 or rng.random() < 0.3:
        r = rng.random()
        if r < 0.35:
            return Num(round(float(rng.uniform(-3, 3)), 3))
        if r < 0.45:
            return Const("pi")
        if r < 0.55:
            return Var("t", 0)
        if r < 0.8 and n:
            return Var("x", int(rng.integers(1, n + 1)))
        if m:
            return Var("u", int(rng.integers(1, m + 1)))
        return Var("x", int(rng.integers(1, n + 1)))
    r = rng.random()
    if r < 0.15:
        inner = random_tree(rng, n, m, depth - 1)
        return Num(-inner.value) if isinstance(inner, Num) else Neg(inner)
    if r < 0.65:
        op = rng.choice(["+", "-", "*", "/"])
        return Bin(op, random_tree(rng, n, m, depth - 1), random_tree(rng, n, m, depth - 1))
    if r < 0.72:
        return Bin("^", random_tree(rng, n, m, depth - 1), Num(float(rng.integers(0, 4))))
    fn = rng.choice(["sin", "cos", "exp", "log", "sqrt", "abs", "max2", "min2"])
    a = random_tree(rng, n, m, depth - 1)
    if fn in ("max2", "min2"):
        return Call(fn, (a, random_tree(rng, n, m, depth - 1)))
    return Call(fn, (a,))


def test_parse_print_parse_fixed_point():
    rng = np.random.default_rng(20240817)
    checked = 0
    while checked < 400:
        e = random_tree(rng, n=3, m=2, depth=6)
        src = to_source(e)
        assert parse_expr(src, 3, 2) == e, src
        checked += 1


def finite_difference_grad(e, t, x, u, h=1e-6):
    z = np.array(list(x) + list(u), dtype=float)
    n = len(x)
    g = np.empty_like(z)
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        step = h * max(1.0, abs(z[i]))
        zp[i] += step
        zm[i] -= step
        fp = evaluate(e, t, list(zp[:n]), list(zp[n:]))
        fm = evaluate(e, t, list(zm[:n]), list(zm[n:]))
        g[i] = (fp - fm) / (2 * step)
    return g


def sample_ad_fd_case(rng, n=2, m=2):
    """Draw (expr, point) where value, gradient and FD are all well-behaved."""
    while True:
        e = random_tree(rng, n, m, depth=5)
        t = float(rng.uniform(0, 1))
        x = [float(v) for v in rng.uniform(-2, 2, size=n)]
        u = [float(v) for v in rng.uniform(-2, 2, size=m)]
        try:
            v = evaluate(e, t, x, u)
            gx, gu = grad(e, t, x, u)
            fd = finite_difference_grad(e, t, x, u)
        except (DomainError, NondifferentiableError, OverflowError):
            continue
        g = np.concatenate([gx, gu])
        if abs(v) > 1e3 or np.linalg.norm(g) > 1e3 or not np.all(np.isfinite(fd)):
            continue
        return g, fd


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(250):
        g, fd = sample_ad_fd_case(rng)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(g))


def test_hessian_symmetric_exactly():
    rng = np.random.default_rng(11)
    done = 0
    while done < 30:
        e = random_tree(rng, 2, 1, depth=4)
        try:
            H = hessian(e, 0.3, [0.4, -0.2], [0.6])
        except (DomainError, NondifferentiableError):
            continue
        if not np.all(np.isfinite(H)):
            continue
        assert np.array_equal(H, H.T)
        done += 1
