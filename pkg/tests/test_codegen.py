import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockflow import expr as ex
from blockflow.codegen import (HEAP_PATTERN, UNROLL_LIMIT, CodegenUnsupportedBlock, emit_c_harness, emit_c_header,
                               emit_c_source, emit_linearization, interpret, interpret_trace, lower_to_flat_program)
from blockflow.graph import CycleAborted, Diagram, Executor, detect_algebraic_loops
from blockflow.loopsolve import LoopDivergence, NewtonConfig
from blockflow.stdblocks import Constant, FunctionBlock, Gain, Product, Sum

from helpers import gain_loop, scaled_sum, random_dag_diagram, random_loop_diagram

GOLDEN = Path(__file__).parent / "golden"
GCC = shutil.which("gcc") or shutil.which("cc")


def engine_and_interpreter(d, cycles):
    p = lower_to_flat_program(d, outputs="all")
    eng = Executor(d).run(cycles, record=list(p.output_slots))
    return p, np.array(eng, dtype=float), np.array(interpret_trace(p, cycles), dtype=float)


def ring_of_loops(n=5, self_gain=0.3, link=0.2):
    """``n`` sums, each with its own algebraic self loop and a link to the next; n unknowns."""
    d = Diagram()
    sums = [d.add(Sum("+++"), f"s{i}") for i in range(n)]
    for i, s in enumerate(sums):
        c = d.add(Constant(float(i + 1)), f"c{i}")
        g = d.add(Gain(self_gain), f"g{i}")
        h = d.add(Gain(link), f"h{i}")
        d.connect(c.o(0), s.i(0))
        d.connect(s.o(0), g.i(0))
        d.connect(g.o(0), s.i(1))
        d.connect(sums[(i + 1) % n].o(0), h.i(0))
        d.connect(h.o(0), s.i(2))
    return d, sums


# ---------------------------------------------------------------------------
# lowering and interpretation


def test_scaled_sum_program():
    d, s = scaled_sum()
    p = lower_to_flat_program(d)
    assert {op: p.count(op) for op in ("load", "mul", "add", "store")} == {"load": 2, "mul": 1, "add": 1, "store": 1}
    assert len(p.instructions) == 5
    out, state = interpret(p, p.state_init)
    assert out == [4.5] and state == []
    assert p.outputs == ("s.out0",)


def test_gain_loop_program_has_newton_loop():
    d, s = gain_loop(1.0, 0.5)
    p = lower_to_flat_program(d, outputs=[(s.id, 0)])
    assert p.count("newton") == 1
    (loop,) = p.loops
    assert loop.size == 1 and loop.max_iterations == 50 and loop.tolerance == 1e-10
    assert "linsolve-1" in p.dump()
    assert interpret(p, p.state_init)[0] == [2.0]


def test_function_block_is_not_lowerable():
    d = Diagram()
    c = d.add(Constant(1.0))
    f = d.add(FunctionBlock(lambda x: 2 * x))
    d.connect(c.o(0), f.i(0))
    with pytest.raises(CodegenUnsupportedBlock) as info:
        lower_to_flat_program(d)
    assert info.value.block_id == f.id


def test_interpreter_rejects_bad_state_and_inputs():
    d, _ = scaled_sum()
    p = lower_to_flat_program(d)
    with pytest.raises(ValueError):
        interpret(p, [0.0])
    with pytest.raises(ValueError):
        interpret(p, [], [1.0])


def test_interpreter_divergence_contract():
    # s = 1 + 0.4 s^2 has no real root, so Newton cannot converge
    d = Diagram()
    c = d.add(Constant(1.0))
    s = d.add(Sum("++"))
    sq = d.add(Product(2))
    g = d.add(Gain(0.4))
    d.connect(c.o(0), s.i(0))
    d.connect(s.o(0), sq.i(0))
    d.connect(s.o(0), sq.i(1))
    d.connect(sq.o(0), g.i(0))
    d.connect(g.o(0), s.i(1))
    p = lower_to_flat_program(d, newton=NewtonConfig(max_iterations=12))
    with pytest.raises(LoopDivergence) as info:
        interpret(p, p.state_init)
    assert info.value.iterations == 12
    with pytest.raises(CycleAborted):
        Executor(d, newton=NewtonConfig(max_iterations=12)).step()


def test_ring_of_five_unknowns_matches_engine():
    d, sums = ring_of_loops()
    (cl,) = detect_algebraic_loops(d)
    assert len(cl.unknowns) == 5 > UNROLL_LIMIT
    p, eng, itp = engine_and_interpreter(d, 3)
    assert np.array_equal(eng, itp)


@pytest.mark.parametrize("k", range(50))
def test_random_dag_interpreter_equals_engine(k):
    d = random_dag_diagram(np.random.default_rng(1000 + k))
    _, eng, itp = engine_and_interpreter(d, 500)
    np.testing.assert_allclose(itp, eng, rtol=0, atol=1e-12)


@pytest.mark.parametrize("k", range(10))
def test_random_loop_interpreter_equals_engine(k):
    d = random_loop_diagram(np.random.default_rng(2000 + k))
    assert detect_algebraic_loops(d)
    _, eng, itp = engine_and_interpreter(d, 500)
    np.testing.assert_allclose(itp, eng, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# C emission


def test_scaled_sum_golden_files():
    d, _ = scaled_sum()
    p = lower_to_flat_program(d)
    assert emit_c_source(p, "scaled_sum") == (GOLDEN / "scaled_sum.c").read_text()
    assert emit_c_header(p, "scaled_sum") == (GOLDEN / "scaled_sum.h").read_text()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_emission_is_deterministic(seed, loop):
    make = random_loop_diagram if loop else random_dag_diagram
    a = emit_c_source(lower_to_flat_program(make(np.random.default_rng(seed))), "m")
    b = emit_c_source(lower_to_flat_program(make(np.random.default_rng(seed))), "m")
    assert a == b
    assert not HEAP_PATTERN.search(a)


def test_newton_config_literals_are_emitted():
    d, _ = gain_loop()
    src = emit_c_source(lower_to_flat_program(d, newton=NewtonConfig(tolerance=1e-9, max_iterations=17)))
    assert "if (norm <= 1e-09) break;" in src
    assert "if (it >= 17) return 1;" in src


def test_large_loop_uses_looped_elimination():
    d, _ = ring_of_loops()
    src = emit_c_source(lower_to_flat_program(d), "ring")
    assert "int i, c, k;" in src
    d, _ = gain_loop()
    assert "int i, c, k;" not in emit_c_source(lower_to_flat_program(d), "gain_loop")


def _compile_and_run(tmp_path, p, name, cycles):
    (tmp_path / f"{name}.h").write_text(emit_c_header(p, name))
    (tmp_path / f"{name}.c").write_text(emit_c_source(p, name))
    (tmp_path / "main.c").write_text(emit_c_harness(p, name, cycles))
    exe = tmp_path / name
    subprocess.run([GCC, "-std=c89", "-pedantic", "-Wall", "-Werror", "-Wno-unused-parameter", "-O1",
                    "-o", str(exe), str(tmp_path / f"{name}.c"), str(tmp_path / "main.c"), "-lm"],
                   check=True, capture_output=True, text=True)
    out = subprocess.run([str(exe)], check=True, capture_output=True, text=True).stdout
    return np.array([[float(v) for v in line.split()] for line in out.splitlines()])


@pytest.mark.skipif(GCC is None, reason="no C compiler")
def test_compiled_code_matches_interpreter(tmp_path):
    cases = [("scaled_sum", scaled_sum()[0]), ("gain_loop", gain_loop()[0]), ("ring", ring_of_loops()[0])]
    cases += [(f"dag{k}", random_dag_diagram(np.random.default_rng(1000 + k))) for k in range(8)]
    cases += [(f"loop{k}", random_loop_diagram(np.random.default_rng(2000 + k))) for k in range(4)]
    for name, d in cases:
        p = lower_to_flat_program(d, outputs="all")
        want = np.array(interpret_trace(p, 100), dtype=float)
        got = _compile_and_run(tmp_path, p, name, 100)
        np.testing.assert_allclose(got.reshape(want.shape), want, rtol=1e-12, atol=1e-12, err_msg=name)
    assert _compile_and_run(tmp_path, lower_to_flat_program(scaled_sum()[0]), "scaled_sum", 1)[0, 0] == 4.5


# ---------------------------------------------------------------------------
# linearization


def test_linearize_affine():
    x1, x2, u = ex.Var("x1"), ex.Var("x2"), ex.Var("u")
    f = [2 * x1 - 3 * x2 + 5 * u, x1 + 0.5 * x2 - u]
    lin = emit_linearization(f, ["x1", "x2"], ["u"])
    A, B = lin.evaluate([0.3, -1.2], [0.7])
    np.testing.assert_array_equal(A, [[2, -3], [1, 0.5]])
    np.testing.assert_array_equal(B, [[5], [-1]])


def test_linearize_pendulum_like():
    x1, x2, u = ex.Var("x1"), ex.Var("x2"), ex.Var("u")
    lin = emit_linearization([x2, -x1 ** 2 + u], ["x1", "x2"], ["u"], "plant_lin")
    A, B = lin.evaluate([1.5, 0.0], [0.0])
    np.testing.assert_array_equal(A, [[0, 1], [-3, 0]])
    np.testing.assert_array_equal(B, [[0], [1]])
    assert "void plant_lin(const double *x, const double *u, const double *p, double *A, double *B)" in lin.source
    assert "    A[2] = ((-2.0) * x[0]);" in lin.source
    assert not HEAP_PATTERN.search(lin.source)


def test_linearization_matches_finite_differences():
    x1, x2, u, k = ex.Var("x1"), ex.Var("x2"), ex.Var("u"), ex.Var("k")
    f = [x2 * x1 + k * u ** 2, -k * x1 ** 3 + x2 / (1 + x1 ** 2) + u * x2]
    lin = emit_linearization(f, ["x1", "x2"], ["u"])
    assert lin.parameters == ("k",)
    rng = np.random.default_rng(4)

    def F(x, uu):
        t = {"x1": x[0], "x2": x[1], "u": uu[0], "k": 0.7}
        return np.array([ex.evaluate(fi, t) for fi in f])

    h = 1e-6
    for _ in range(5):
        x, uu = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 1)
        A, B = lin.evaluate(x, uu, {"k": 0.7})
        for j in range(2):
            e = np.eye(2)[j] * h
            np.testing.assert_allclose((F(x + e, uu) - F(x - e, uu)) / (2 * h), A[:, j], atol=1e-6)
        np.testing.assert_allclose((F(x, uu + h) - F(x, uu - h)) / (2 * h), B[:, 0], atol=1e-6)


@pytest.mark.skipif(GCC is None, reason="no C compiler")
def test_linearization_source_compiles(tmp_path):
    x1, x2, u, k = ex.Var("x1"), ex.Var("x2"), ex.Var("u"), ex.Var("k")
    lin = emit_linearization([x2 * x1 + k * u ** 2, -k * x1 ** 3 + u * x2], ["x1", "x2"], ["u"], "lin")
    (tmp_path / "lin.c").write_text(lin.source)
    (tmp_path / "main.c").write_text(
        "#include <stdio.h>\n"
        "void lin(const double *x, const double *u, const double *p, double *A, double *B);\n"
        "int main(void) { double x[2] = {0.5, -0.25}, u[1] = {0.3}, p[1] = {0.7}, A[4], B[2]; int i;\n"
        "lin(x, u, p, A, B); for (i = 0; i < 4; i++) printf(\"%.17g \", A[i]);\n"
        "for (i = 0; i < 2; i++) printf(\"%.17g \", B[i]);\n"
        "return 0; }\n")
    exe = tmp_path / "lin"
    subprocess.run([GCC, "-std=c89", "-Wall", "-Werror", "-o", str(exe), str(tmp_path / "lin.c"),
                    str(tmp_path / "main.c")], check=True, capture_output=True)
    got = [float(v) for v in subprocess.run([str(exe)], capture_output=True, text=True).stdout.split()]
    A, B = lin.evaluate([0.5, -0.25], [0.3], {"k": 0.7})
    np.testing.assert_allclose(got, list(A.ravel()) + list(B.ravel()), rtol=1e-15)
