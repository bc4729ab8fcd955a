import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockflow import expr as ex
from blockflow.graph import Diagram, Executor, detect_algebraic_loops
from blockflow.loopsolve import (LoopCluster, LoopDivergence, NewtonConfig, ResidualSystem, SingularJacobian,
                                 SymbolicallyUnsolvableLoop, build_residual_system, extract_residual_system,
                                 gauss_solve, jacobian_values, newton_step, residual_values, solve_loop)
from blockflow.stdblocks import Constant, Saturation, Sum

from helpers import gain_loop, two_unknown_loop


def _gain_loop_system(C=1.0, G=0.5):
    d, _ = gain_loop(C, G)
    (cl,) = detect_algebraic_loops(d)
    return d, cl, extract_residual_system(cl, d)


def test_gain_loop_residual_and_jacobian():
    d, cl, rs = _gain_loop_system()
    assert rs.unknowns == ("s.out0",)
    assert rs.external_inputs == ("c.out0",)
    assert rs.parameters == {"g.gain": 0.5}
    for C, G, S in [(1.0, 0.5, 3.0), (2.0, -1.0, 0.25)]:
        t = {"c.out0": C, "g.gain": G, "s.out0": S}
        assert ex.evaluate(rs.residuals[0], t) == C + G * S - S
        assert ex.evaluate(rs.jacobian[0][0], t) == G - 1
    assert ex.free_symbols(rs.jacobian[0][0]) == {"g.gain"}
    assert "f[s.out0] =" in rs.dump() and "J[0,0] = (g.gain - 1)" in rs.dump()


def test_two_unknown_affine_loop():
    d, s, g1, g2 = two_unknown_loop(c=1.5, g1=0.5, g2=0.25)
    members = (s.id, g1.id, g2.id)
    edges = tuple(e for e in d.sorted_edges() if e.source.block_id in members and e.sink.block_id in members)
    cl = LoopCluster(members, edges,
                     unknowns=(("x1", s.o(0)), ("x2", g2.o(0))),
                     external_inputs=(("c", d["c"].o(0)),))
    rs = extract_residual_system(cl, d)
    params = {"g1.gain": 0.5, "g2.gain": 0.25, "c": 1.5}
    rng = np.random.default_rng(0)
    for x1, x2 in rng.uniform(-3, 3, (5, 2)):
        t = dict(params, x1=x1, x2=x2)
        f = [ex.evaluate(e, t) for e in rs.residuals]
        assert f == pytest.approx([1.5 + 0.5 * x2 - x1, 0.25 * x1 - x2], abs=1e-14)
        J = jacobian_values(rs, [x1, x2], params)
        assert J == [[-1.0, 0.5], [0.25, -1.0]]
        # central finite differences of the residuals
        h = 1e-6
        for j in range(2):
            xp, xm = [x1, x2], [x1, x2]
            xp[j] += h
            xm[j] -= h
            fd = (np.array(residual_values(rs, xp, params)) - residual_values(rs, xm, params)) / (2 * h)
            np.testing.assert_allclose(fd, [J[0][j], J[1][j]], rtol=1e-6, atol=1e-8)
    sol = solve_loop(rs, params)
    np.testing.assert_allclose(sol.values, np.linalg.solve([[1, -0.5], [-0.25, 1]], [1.5, 0]), atol=1e-12)
    assert sol.iterations == 1


def test_saturation_in_loop_is_unsolvable():
    d = Diagram()
    c = d.add(Constant(1.0))
    s = d.add(Sum("++"))
    sat = d.add(Saturation(-1, 1))
    d.connect(c.o(0), s.i(0))
    d.connect(sat.o(0), s.i(1))
    d.connect(s.o(0), sat.i(0))
    (cl,) = detect_algebraic_loops(d)
    with pytest.raises(SymbolicallyUnsolvableLoop) as info:
        extract_residual_system(cl, d)
    assert info.value.block_id == sat.id
    with pytest.raises(SymbolicallyUnsolvableLoop):
        Executor(d)


def test_newton_step_gain_loop_is_exact():
    _, _, rs = _gain_loop_system()
    assert newton_step(rs, [0.0], {"c.out0": 1.0}) == [2.0]


def test_singular_when_gain_is_one():
    _, _, rs = _gain_loop_system(G=1.0)
    with pytest.raises(SingularJacobian):
        newton_step(rs, [0.0], {"c.out0": 1.0})
    with pytest.raises(SingularJacobian):
        solve_loop(rs, {"c.out0": 1.0})


def test_quadratic_newton_step():
    x = ex.Var("x")
    rs = build_residual_system({"x": x * x - 4 + x})
    assert ex.evaluate(rs.residuals[0], {"x": 3.0}) == 5.0
    step = newton_step(rs, [3.0], {})
    assert step[0] == pytest.approx(3 - 5 / 6, abs=1e-15)
    sol = solve_loop(rs, {}, [3.0])
    assert sol.values[0] == pytest.approx(2.0, abs=1e-10)
    assert sol.iterations > 1


@pytest.mark.parametrize("C,expected", [(1.0, 2.0), (5.0, 10.0)])
def test_solve_loop_gain_loop(C, expected):
    _, _, rs = _gain_loop_system(C)
    sol = solve_loop(rs, {"c.out0": C})
    assert sol.values == (expected,)
    assert sol.iterations == 1
    assert sol.residual_norm <= 1e-10


def test_divergence_is_reported():
    x = ex.Var("x")
    rs = build_residual_system({"x": x * x - 4 + x}, NewtonConfig(max_iterations=2))
    with pytest.raises(LoopDivergence) as info:
        solve_loop(rs, {}, [100.0])
    assert info.value.iterations == 2
    assert info.value.residual_norm > 1


def test_newton_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(tolerance=0)
    with pytest.raises(ValueError):
        NewtonConfig(max_iterations=0)
    with pytest.raises(ValueError):
        NewtonConfig(initial_guess="random")


def test_residual_system_dimension_check():
    with pytest.raises(ValueError):
        ResidualSystem(("x",), (), ())


def test_gauss_solve_pivots():
    a = [[0.0, 2.0], [3.0, 1.0]]
    assert gauss_solve(a, [4.0, 5.0]) == pytest.approx([1.0, 2.0])
    with pytest.raises(SingularJacobian):
        gauss_solve([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0])
    with pytest.raises(SingularJacobian):
        gauss_solve([[0.0]], [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_gauss_solve_matches_numpy(seed, n):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n)) + n * np.eye(n)
    b = rng.normal(size=n)
    np.testing.assert_allclose(gauss_solve(a.tolist(), b.tolist()), np.linalg.solve(a, b), rtol=1e-10, atol=1e-12)


def _random_affine(rng, n):
    m = rng.normal(size=(n, n))
    m *= rng.uniform(0.1, 0.95) / max(np.abs(np.linalg.eigvals(m)).max(), 1e-9)
    b = rng.normal(size=n)
    names = [f"x{i}" for i in range(n)]
    outs = {}
    for i in range(n):
        terms = [ex.Var(f"b{i}")] + [ex.Mul((ex.Const(m[i, j]), ex.Var(names[j]))) for j in range(n)]
        outs[names[i]] = ex.Add(tuple(terms))
    rs = build_residual_system(outs, external_inputs=[f"b{i}" for i in range(n)])
    return rs, m, b, {f"b{i}": b[i] for i in range(n)}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_affine_loops_match_dense_solve(seed, n):
    rng = np.random.default_rng(seed)
    rs, m, b, binds = _random_affine(rng, n)
    exact = np.linalg.solve(np.eye(n) - m, b)
    for x0 in (None, rng.normal(size=n) * 10):
        sol = solve_loop(rs, binds, x0)
        np.testing.assert_allclose(sol.values, exact, atol=1e-10)
        assert sol.iterations == 1  # Newton is exact on affine systems


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_jacobian_matches_finite_differences(seed, n):
    rng = np.random.default_rng(seed)
    names = [f"x{i}" for i in range(n)]
    outs = {}
    for i in range(n):
        terms = [ex.Const(rng.uniform(-1, 1))]
        for j in range(n):
            terms.append(ex.Mul((ex.Const(rng.uniform(-1, 1)), ex.Var(names[j]), ex.Var(names[(j + i) % n]))))
            terms.append(ex.Pow(ex.Var(names[j]), int(rng.integers(1, 4))))
        outs[names[i]] = ex.Add(tuple(terms))
    rs = build_residual_system(outs)
    for _ in range(5):
        x = rng.uniform(-1.5, 1.5, n)
        J = np.array(jacobian_values(rs, x, {}))
        h = 1e-6
        for j in range(n):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (np.array(residual_values(rs, xp, {})) - np.array(residual_values(rs, xm, {}))) / (2 * h)
            np.testing.assert_allclose(fd, J[:, j], rtol=1e-6, atol=1e-7)


def test_warm_start_does_not_change_answer():
    d, s = gain_loop(3.0, -0.25)
    warm = Executor(d, newton=NewtonConfig(initial_guess="warm"))
    cold = Executor(d, newton=NewtonConfig(initial_guess="zeros"))
    for _ in range(3):
        assert warm.step()[(s.id, 0)] == cold.step()[(s.id, 0)]
    # the warm solver starts at the answer and needs no iteration
    assert warm.last_iterations[s.id] == 0
    assert cold.last_iterations[s.id] == 1
