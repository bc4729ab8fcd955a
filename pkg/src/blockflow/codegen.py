"""Lowering diagrams to a flat register program, interpreting it, and printing C.

A :class:`FlatProgram` is one diagram cycle as straight-line code over
double registers. Operands are either registers or entries of the
constant pool (block parameters become pool operands, so they cost no
instruction). Each algebraic loop becomes a :class:`NewtonLoop`: a
bounded iteration whose residual and Jacobian bodies are compiled from the
symbolic residual system, followed by a dense linear solve.

The interpreter follows the engine operation by operation, so the two
agree to the last bit; the C printer emits the same operations in C89.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import expr as ex
from .graph import SCALAR, Diagram, ExecutionSchedule, loop_plan, resolve_execution_order, validate_diagram, DiagramInvalid
from .loopsolve import LoopCluster, LoopDivergence, NewtonConfig, gauss_solve

UNROLL_LIMIT = 4
PIVOT_TOLERANCE = 1e-12


class CodegenError(Exception):
    pass


class CodegenUnsupportedBlock(CodegenError):
    def __init__(self, block_id: int, kind: str, reason: str = "is not lowerable"):
        super().__init__(f"block #{block_id} ({kind}) {reason}")
        self.block_id = block_id
        self.kind = kind


class Operand(NamedTuple):
    kind: str  # "r" register or "k" constant pool
    index: int

    def __str__(self):
        return f"{self.kind}{self.index}"


class Instr(NamedTuple):
    op: str
    dst: Optional[int]
    args: tuple

    def __str__(self):
        a = ", ".join(str(x) for x in self.args)
        return f"r{self.dst} = {self.op} {a}" if self.dst is not None else f"{self.op} {a}"


@dataclass(frozen=True)
class NewtonLoop:
    """``x`` registers hold the unknowns; bodies recompute ``f`` and ``J`` from them."""

    size: int
    x_regs: Tuple[int, ...]
    residual: Tuple[Instr, ...]
    f_ops: Tuple[Operand, ...]
    jacobian: Tuple[Instr, ...]
    j_ops: Tuple[Tuple[Operand, ...], ...]
    tolerance: float
    max_iterations: int
    warm_slots: Tuple[int, ...] = ()
    members: Tuple[int, ...] = ()


@dataclass(frozen=True)
class FlatProgram:
    constants: Tuple[float, ...]
    state_init: Tuple[float, ...]
    state_names: Tuple[str, ...]
    instructions: Tuple[Instr, ...]
    loops: Tuple[NewtonLoop, ...]
    n_regs: int
    outputs: Tuple[str, ...]
    output_slots: Tuple[Tuple[int, int], ...] = ()

    def count(self, op: str) -> int:
        return sum(1 for i in self.instructions if i.op == op)

    def dump(self) -> str:
        lines = [f"pool: {', '.join(repr(c) for c in self.constants)}",
                 f"state: {', '.join(f'{n}={v!r}' for n, v in zip(self.state_names, self.state_init))}"]
        for ins in self.instructions:
            if ins.op == "newton":
                loop = self.loops[ins.args[0]]
                lines.append(f"newton n={loop.size} x={list(loop.x_regs)} tol={loop.tolerance!r} "
                             f"max={loop.max_iterations} {{")
                lines.extend("  f: " + str(i) for i in loop.residual)
                lines.extend("  J: " + str(i) for i in loop.jacobian)
                lines.append(f"  linsolve-{loop.size}")
                lines.append("}")
            else:
                lines.append(str(ins))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# lowering


class _Emitter:
    """The interface blocks see in ``lower`` / ``lower_update``."""

    def __init__(self):
        self.pool: List[float] = []
        self._pool_index: Dict[Tuple[float, bool], int] = {}
        self.code: List[Instr] = []
        self.n_regs = 0
        self.block = None

    def _scalar(self, v) -> float:
        if np.ndim(v) != 0:
            raise CodegenUnsupportedBlock(self.block.id, self.block.kind, "has non-scalar values")
        return float(v)

    def const(self, v) -> Operand:
        v = self._scalar(v)
        key = (v, bool(np.signbit(v)))
        if key not in self._pool_index:
            self._pool_index[key] = len(self.pool)
            self.pool.append(v)
        return Operand("k", self._pool_index[key])

    def _new(self) -> int:
        r = self.n_regs
        self.n_regs += 1
        return r

    def _emit(self, op, *args) -> Operand:
        r = self._new()
        self.code.append(Instr(op, r, tuple(args)))
        return Operand("r", r)

    # block-facing operations
    def load_const(self, v) -> Operand:
        return self._emit("load", self.const(v))

    def param(self, v) -> Operand:
        return self.const(v)

    def add(self, a, b):
        return self._emit("add", a, b)

    def mul(self, a, b):
        return self._emit("mul", a, b)

    def neg(self, a):
        return self._emit("neg", a)

    def div(self, a, b):
        return self._emit("div", a, b)

    def clamp(self, x, lo, hi):
        return self._emit("clamp", x, lo, hi)

    def select(self, c, threshold, a, b):
        """``a`` if ``c > threshold`` else ``b``."""
        return self._emit("select", c, threshold, a, b)

    def load_state(self, slot: int):
        return self._emit("lstate", slot)

    def store_state(self, slot: int, src) -> None:
        self.code.append(Instr("sstate", None, (slot, src)))

    def store_output(self, index: int, src) -> None:
        self.code.append(Instr("store", None, (index, src)))


def _compile_expr(em: _Emitter, e: ex.Expr, env: Dict[str, Operand]) -> Operand:
    """Compile with the same operation order as :func:`expr.evaluate`."""
    if isinstance(e, ex.Const):
        return em.const(e.value)
    if isinstance(e, ex.Var):
        try:
            return env[e.name]
        except KeyError:
            raise ex.UnboundSymbol(e.name) from None
    if isinstance(e, (ex.Add, ex.Mul)):
        op = "add" if isinstance(e, ex.Add) else "mul"
        acc = _compile_expr(em, e.operands[0], env)
        for o in e.operands[1:]:
            acc = em._emit(op, acc, _compile_expr(em, o, env))
        return acc
    if isinstance(e, ex.Neg):
        return em.neg(_compile_expr(em, e.operand, env))
    if isinstance(e, ex.Div):
        n = _compile_expr(em, e.num, env)
        return em.div(n, _compile_expr(em, e.den, env))
    if isinstance(e, ex.Pow):
        b = _compile_expr(em, e.base, env)
        acc = em.const(1.0)
        for _ in range(abs(e.exponent)):
            acc = em.mul(acc, b)
        if e.exponent < 0:
            acc = em.div(em.const(1.0), acc)
        return acc
    raise CodegenError(f"cannot compile expression node {type(e).__name__}")


def _check_lowerable(d: Diagram, bid: int):
    block = d.blocks[bid]
    if not getattr(block, "lowerable", False) or not hasattr(block, "lower"):
        raise CodegenUnsupportedBlock(bid, block.kind)
    if any(t != SCALAR for t in block.input_types + block.output_types):
        raise CodegenUnsupportedBlock(bid, block.kind, "has non-scalar ports")
    if block.stateful and not hasattr(block, "lower_init"):
        raise CodegenUnsupportedBlock(bid, block.kind, "has no lowered state layout")


def lower_to_flat_program(d: Diagram, schedule: Optional[ExecutionSchedule] = None,
                          newton: Optional[NewtonConfig] = None,
                          outputs: Union[None, str, Sequence[Tuple[int, int]]] = None) -> FlatProgram:
    """Lower one cycle of ``d``.

    ``outputs`` selects the stored signals: ``None`` for every output slot
    nobody consumes, ``"all"`` for every output slot, or explicit
    ``(block_id, index)`` pairs.
    """
    report = validate_diagram(d)
    if not report.ok:
        raise DiagramInvalid(report)
    schedule = schedule or resolve_execution_order(d)
    newton = newton or NewtonConfig()
    order = schedule.block_order()
    for bid in order:
        _check_lowerable(d, bid)

    em = _Emitter()
    state_init: List[float] = []
    state_names: List[str] = []
    slots: Dict[int, List[int]] = {}
    for bid in order:
        block = d.blocks[bid]
        if block.stateful:
            em.block = block
            init = [em._scalar(v) for v in block.lower_init()]
            slots[bid] = list(range(len(state_init), len(state_init) + len(init)))
            state_init.extend(init)
            state_names.extend(f"{block.label}.s{k}" for k in range(len(init)))
        else:
            slots[bid] = []

    sig: Dict[Tuple[int, int], Operand] = {}

    def inputs_of(bid):
        block = d.blocks[bid]
        out = []
        for k in range(block.n_in):
            src = d.driver(d.input_slot(bid, k))
            out.append(sig[(src.block_id, src.index)])
        return out

    def lower_block(bid, skip=()):
        block = d.blocks[bid]
        em.block = block
        ins = inputs_of(bid) if block.direct_feedthrough else None
        outs = block.lower(em, ins, slots[bid])
        for k, v in enumerate(outs):
            if (bid, k) not in skip:
                sig[(bid, k)] = v

    loops: List[NewtonLoop] = []
    for item in schedule.items:
        if not isinstance(item, LoopCluster):
            lower_block(item)
            continue
        rs, member_order, externals, unknowns = loop_plan(d, item, newton)
        n = rs.size
        warm_slots = ()
        if newton.initial_guess == "warm":
            warm_slots = tuple(range(len(state_init), len(state_init) + n))
            state_init.extend([0.0] * n)
            state_names.extend(f"loop{{{','.join(map(str, item.member_blocks))}}}.{name}" for name in rs.unknowns)
        main_code = em.code
        x_regs = []
        for k in range(n):
            if warm_slots:
                x_regs.append(em.load_state(warm_slots[k]).index)
            else:
                x_regs.append(em.load_const(0.0).index)
        env: Dict[str, Operand] = {name: Operand("r", r) for name, r in zip(rs.unknowns, x_regs)}
        for name, value in rs.parameters.items():
            env[name] = em.const(value)
        for sym, src in externals:
            env[sym] = sig[src]
        em.code = []
        f_ops = tuple(_compile_expr(em, f, env) for f in rs.residuals)
        residual = tuple(em.code)
        em.code = []
        j_ops = tuple(tuple(_compile_expr(em, e, env) for e in row) for row in rs.jacobian)
        jacobian = tuple(em.code)
        em.code = main_code
        loops.append(NewtonLoop(n, tuple(x_regs), residual, f_ops, jacobian, j_ops, newton.tolerance,
                                newton.max_iterations, warm_slots, tuple(item.member_blocks)))
        em.code.append(Instr("newton", None, (len(loops) - 1,)))
        for k, slot in enumerate(warm_slots):
            em.store_state(slot, Operand("r", x_regs[k]))
        for k, src in enumerate(unknowns):
            sig[src] = Operand("r", x_regs[k])
        for bid in member_order:
            lower_block(bid, skip=set(unknowns))

    # output selection
    if outputs is None:
        chosen = [(bid, k) for bid in sorted(d.blocks) for k in range(d.blocks[bid].n_out)
                  if not d.consumers(d.output_slot(bid, k))]
    elif outputs == "all":
        chosen = [(bid, k) for bid in sorted(d.blocks) for k in range(d.blocks[bid].n_out)]
    else:
        chosen = [tuple(o) for o in outputs]
    names = []
    for idx, (bid, k) in enumerate(chosen):
        em.store_output(idx, sig[(bid, k)])
        names.append(d.signal_symbol(d.output_slot(bid, k)))

    for bid in order:
        block = d.blocks[bid]
        if block.stateful:
            em.block = block
            block.lower_update(em, inputs_of(bid), slots[bid])

    return FlatProgram(tuple(em.pool), tuple(state_init), tuple(state_names), tuple(em.code), tuple(loops),
                       em.n_regs, tuple(names), tuple(chosen))


# ---------------------------------------------------------------------------
# interpreter


def _run(code, regs, pool, state, out):
    def val(o):
        return regs[o.index] if o.kind == "r" else pool[o.index]

    for op, dst, a in code:
        if op == "add":
            regs[dst] = val(a[0]) + val(a[1])
        elif op == "mul":
            regs[dst] = val(a[0]) * val(a[1])
        elif op == "load":
            regs[dst] = val(a[0])
        elif op == "lstate":
            regs[dst] = state[a[0]]
        elif op == "neg":
            regs[dst] = -val(a[0])
        elif op == "div":
            den = val(a[1])
            if den == 0.0:
                raise ex.EvalSingularity("division by zero in lowered program")
            regs[dst] = val(a[0]) / den
        elif op == "clamp":
            x, lo, hi = val(a[0]), val(a[1]), val(a[2])
            regs[dst] = hi if x > hi else (lo if x < lo else x)
        elif op == "select":
            regs[dst] = val(a[2]) if val(a[0]) > val(a[1]) else val(a[3])
        elif op == "sstate":
            state[a[0]] = val(a[1])
        elif op == "store":
            out[a[0]] = val(a[1])
        elif op == "newton":
            yield a[0]
        else:
            raise CodegenError(f"unknown instruction {op}")


def _newton(loop: NewtonLoop, regs, pool, state):
    def val(o):
        return regs[o.index] if o.kind == "r" else pool[o.index]

    def body(code):
        for _ in _run(code, regs, pool, state, None):
            raise CodegenError("nested Newton loops are not supported")

    it = 0
    while True:
        body(loop.residual)
        f = [val(o) for o in loop.f_ops]
        norm = max((abs(v) for v in f), default=0.0)
        if norm <= loop.tolerance:
            return it
        if it >= loop.max_iterations:
            raise LoopDivergence(norm, it)
        body(loop.jacobian)
        jac = [[val(o) for o in row] for row in loop.j_ops]
        dx = gauss_solve(jac, [-v for v in f], PIVOT_TOLERANCE)
        for r, di in zip(loop.x_regs, dx):
            regs[r] = regs[r] + di
        it += 1


def interpret(p: FlatProgram, state: Sequence[float], inputs: Sequence[float] = ()):
    """Run one cycle. Returns ``(outputs, new_state)``; ``state`` is not modified."""
    if len(state) != len(p.state_init):
        raise ValueError(f"state has {len(state)} slots, program needs {len(p.state_init)}")
    if inputs:
        raise ValueError("lowered programs take no external inputs")
    regs = [0.0] * p.n_regs
    st = [float(v) for v in state]
    out = [0.0] * len(p.outputs)
    for k in _run(p.instructions, regs, p.constants, st, out):
        _newton(p.loops[k], regs, p.constants, st)
    return out, st


def interpret_trace(p: FlatProgram, cycles: int) -> List[List[float]]:
    state = list(p.state_init)
    rows = []
    for _ in range(cycles):
        out, state = interpret(p, state)
        rows.append(out)
    return rows


# ---------------------------------------------------------------------------
# C emission


def c_identifier(name: str) -> str:
    s = re.sub(r"[^0-9A-Za-z_]", "_", name)
    if not s or s[0].isdigit():
        s = "_" + s
    return s


def c_double(v: float) -> str:
    v = float(v)
    if v != v:
        return "(0.0/0.0)"
    if v in (float("inf"), float("-inf")):
        return "(1.0/0.0)" if v > 0 else "(-1.0/0.0)"
    s = repr(v)
    if "e" not in s and "." not in s:
        s += ".0"
    return s


def _c_operand(o: Operand) -> str:
    return f"r[{o.index}]" if o.kind == "r" else f"K[{o.index}]"


def _c_instr(ins: Instr) -> str:
    op, dst, a = ins
    o = [_c_operand(x) if isinstance(x, Operand) else None for x in a]
    if op in ("add", "mul", "div"):
        sym = {"add": "+", "mul": "*", "div": "/"}[op]
        return f"r[{dst}] = {o[0]} {sym} {o[1]};"
    if op == "neg":
        return f"r[{dst}] = -{o[0]};"
    if op == "load":
        return f"r[{dst}] = {o[0]};"
    if op == "lstate":
        return f"r[{dst}] = st->s[{a[0]}];"
    if op == "sstate":
        return f"st->s[{a[0]}] = {_c_operand(a[1])};"
    if op == "store":
        return f"out[{a[0]}] = {_c_operand(a[1])};"
    if op == "clamp":
        return f"r[{dst}] = {o[0]} > {o[2]} ? {o[2]} : ({o[0]} < {o[1]} ? {o[1]} : {o[0]});"
    if op == "select":
        return f"r[{dst}] = {o[0]} > {o[1]} ? {o[2]} : {o[3]};"
    raise CodegenError(f"no C form for {op}")


def _c_gauss_unrolled(n: int, ind: str) -> List[str]:
    """Partial-pivot elimination on ``a``/``b`` with fixed size, row swaps by index tests."""
    L = []
    for i in range(n):
        L.append(f"sc[{i}] = 0.0;")
        for j in range(n):
            L.append(f"if (fabs(a[{i}][{j}]) > sc[{i}]) sc[{i}] = fabs(a[{i}][{j}]);")
    for k in range(n):
        L.append(f"/* column {k} */")
        L.append(f"p = {k}; best = fabs(a[{k}][{k}]);")
        for r in range(k + 1, n):
            L.append(f"if (fabs(a[{r}][{k}]) > best) {{ best = fabs(a[{r}][{k}]); p = {r}; }}")
        for r in range(k + 1, n):
            swaps = " ".join(f"t = a[{k}][{c}]; a[{k}][{c}] = a[{r}][{c}]; a[{r}][{c}] = t;" for c in range(n))
            L.append(f"if (p == {r}) {{ {swaps} t = b[{k}]; b[{k}] = b[{r}]; b[{r}] = t; "
                     f"t = sc[{k}]; sc[{k}] = sc[{r}]; sc[{r}] = t; }}")
        if k == n - 1:
            L.append("(void)p;")
        L.append(f"if (sc[{k}] == 0.0 || best < {c_double(PIVOT_TOLERANCE)} * sc[{k}]) return 2;")
        for r in range(k + 1, n):
            L.append(f"t = a[{r}][{k}] / a[{k}][{k}];")
            upd = " ".join(f"a[{r}][{c}] = a[{r}][{c}] - t * a[{k}][{c}];" for c in range(k + 1, n))
            L.append(f"if (t != 0.0) {{ {upd} b[{r}] = b[{r}] - t * b[{k}]; }}")
    for k in range(n - 1, -1, -1):
        L.append(f"t = b[{k}];")
        for c in range(k + 1, n):
            L.append(f"t = t - a[{k}][{c}] * dx[{c}];")
        L.append(f"dx[{k}] = t / a[{k}][{k}];")
    return [ind + s for s in L]


def _c_gauss_looped(n: int, ind: str) -> List[str]:
    L = f"""for (i = 0; i < {n}; i++) {{
    sc[i] = 0.0;
    for (c = 0; c < {n}; c++) if (fabs(a[i][c]) > sc[i]) sc[i] = fabs(a[i][c]);
}}
for (k = 0; k < {n}; k++) {{
    p = k; best = fabs(a[k][k]);
    for (i = k + 1; i < {n}; i++) if (fabs(a[i][k]) > best) {{ best = fabs(a[i][k]); p = i; }}
    if (p != k) {{
        for (c = 0; c < {n}; c++) {{ t = a[k][c]; a[k][c] = a[p][c]; a[p][c] = t; }}
        t = b[k]; b[k] = b[p]; b[p] = t;
        t = sc[k]; sc[k] = sc[p]; sc[p] = t;
    }}
    if (sc[k] == 0.0 || best < {c_double(PIVOT_TOLERANCE)} * sc[k]) return 2;
    for (i = k + 1; i < {n}; i++) {{
        t = a[i][k] / a[k][k];
        if (t != 0.0) {{
            for (c = k + 1; c < {n}; c++) a[i][c] = a[i][c] - t * a[k][c];
            b[i] = b[i] - t * b[k];
        }}
    }}
}}
for (k = {n} - 1; k >= 0; k--) {{
    t = b[k];
    for (c = k + 1; c < {n}; c++) t = t - a[k][c] * dx[c];
    dx[k] = t / a[k][k];
}}"""
    return [ind + s for s in L.split("\n")]


def _c_newton(loop: NewtonLoop, ind: str) -> List[str]:
    n = loop.size
    i2 = ind + "    "
    L = [ind + "{",
         i2 + f"double a[{n}][{n}], b[{n}], dx[{n}], sc[{n}], norm, best, t;",
         i2 + "int it = 0, p;"]
    if n > UNROLL_LIMIT:
        L.append(i2 + "int i, c, k;")
    L.append(i2 + "for (;;) {")
    i3 = i2 + "    "
    L.extend(i3 + _c_instr(x) for x in loop.residual)
    L.append(i3 + "norm = 0.0;")
    for k, o in enumerate(loop.f_ops):
        L.append(i3 + f"b[{k}] = -{_c_operand(o)};")
        L.append(i3 + f"if (fabs({_c_operand(o)}) > norm) norm = fabs({_c_operand(o)});")
    L.append(i3 + f"if (norm <= {c_double(loop.tolerance)}) break;")
    L.append(i3 + f"if (it >= {loop.max_iterations}) return 1;")
    L.extend(i3 + _c_instr(x) for x in loop.jacobian)
    for i, row in enumerate(loop.j_ops):
        for j, o in enumerate(row):
            L.append(i3 + f"a[{i}][{j}] = {_c_operand(o)};")
    L.extend(_c_gauss_unrolled(n, i3) if n <= UNROLL_LIMIT else _c_gauss_looped(n, i3))
    for k, r in enumerate(loop.x_regs):
        L.append(i3 + f"r[{r}] = r[{r}] + dx[{k}];")
    L.append(i3 + "it++;")
    L.append(i2 + "}")
    L.append(ind + "}")
    return L


def emit_c_header(p: FlatProgram, name: str = "diagram") -> str:
    nm = c_identifier(name)
    guard = nm.upper() + "_H"
    ns = max(1, len(p.state_init))
    return "\n".join([
        "/* generated by blockflow; do not edit */",
        f"#ifndef {guard}",
        f"#define {guard}",
        "",
        f"#define {nm.upper()}_N_STATE {len(p.state_init)}",
        f"#define {nm.upper()}_N_OUT {len(p.outputs)}",
        "",
        "typedef struct {",
        f"    double s[{ns}];",
        f"}} {nm}_state;",
        "",
        f"void {nm}_init({nm}_state *st);",
        "/* returns 0 on success, 1 if a loop solve did not converge, 2 on a singular Jacobian */",
        f"int {nm}_step({nm}_state *st, double *out);",
        "",
        f"#endif /* {guard} */",
        "",
    ])


def emit_c_source(p: FlatProgram, name: str = "diagram") -> str:
    """C89 translation unit implementing ``<name>_init`` and ``<name>_step``."""
    nm = c_identifier(name)
    L = ["/* generated by blockflow; do not edit */",
         "#include <math.h>",
         f'#include "{nm}.h"',
         ""]
    if p.outputs:
        L.append("/* outputs: " + ", ".join(f"[{i}] {o}" for i, o in enumerate(p.outputs)) + " */")
    kvals = ", ".join(c_double(v) for v in p.constants) or "0.0"
    L.append(f"static const double K[{max(1, len(p.constants))}] = {{{kvals}}};")
    L.append("")
    L.append(f"void {nm}_init({nm}_state *st)")
    L.append("{")
    if not p.state_init:
        L.append("    st->s[0] = 0.0;")
    for k, (v, n) in enumerate(zip(p.state_init, p.state_names)):
        L.append(f"    st->s[{k}] = {c_double(v)}; /* {n} */")
    L.append("}")
    L.append("")
    L.append(f"int {nm}_step({nm}_state *st, double *out)")
    L.append("{")
    L.append(f"    double r[{max(1, p.n_regs)}];")
    if not p.outputs:
        L.append("    (void)out;")
    for ins in p.instructions:
        if ins.op == "newton":
            L.extend(_c_newton(p.loops[ins.args[0]], "    "))
        else:
            L.append("    " + _c_instr(ins))
    L.append("    return 0;")
    L.append("}")
    L.append("")
    return "\n".join(L)


def emit_c_harness(p: FlatProgram, name: str = "diagram", cycles: int = 100) -> str:
    """A ``main`` that runs ``cycles`` cycles and prints outputs with 17 significant digits."""
    nm = c_identifier(name)
    return "\n".join([
        "#include <stdio.h>",
        f'#include "{nm}.h"',
        "",
        "int main(void)",
        "{",
        f"    {nm}_state st;",
        f"    double out[{max(1, len(p.outputs))}];",
        "    int cyc, k, rc;",
        f"    {nm}_init(&st);",
        f"    for (cyc = 0; cyc < {cycles}; cyc++) {{",
        f"        rc = {nm}_step(&st, out);",
        "        if (rc) { printf(\"error %d\\n\", rc); return rc; }",
        f"        for (k = 0; k < {len(p.outputs)}; k++) printf(k ? \" %.17g\" : \"%.17g\", out[k]);",
        "        printf(\"\\n\");",
        "    }",
        "    return 0;",
        "}",
        "",
    ])


HEAP_PATTERN = re.compile(r"\b(malloc|calloc|realloc|free|alloca)\s*\(")


# ---------------------------------------------------------------------------
# linearization


@dataclass(frozen=True)
class LinearizationResult:
    A: Tuple[Tuple[ex.Expr, ...], ...]
    B: Tuple[Tuple[ex.Expr, ...], ...]
    x_symbols: Tuple[str, ...]
    u_symbols: Tuple[str, ...]
    parameters: Tuple[str, ...]
    source: str = field(default="", compare=False)

    def evaluate(self, x, u, params: Optional[Dict[str, float]] = None):
        table = dict(params or {})
        table.update(zip(self.x_symbols, map(float, x)))
        table.update(zip(self.u_symbols, map(float, u)))
        A = np.array([[ex.evaluate(e, table) for e in row] for row in self.A]).reshape(len(self.A), len(self.x_symbols))
        B = np.array([[ex.evaluate(e, table) for e in row] for row in self.B]).reshape(len(self.B), len(self.u_symbols))
        return A, B


def _c_expr(e: ex.Expr, names: Dict[str, str]) -> str:
    if isinstance(e, ex.Const):
        return c_double(e.value) if e.value >= 0 else f"({c_double(e.value)})"
    if isinstance(e, ex.Var):
        return names[e.name]
    if isinstance(e, ex.Add):
        acc = _c_expr(e.operands[0], names)
        for o in e.operands[1:]:
            acc = f"({acc} + {_c_expr(o, names)})"
        return acc
    if isinstance(e, ex.Mul):
        acc = _c_expr(e.operands[0], names)
        for o in e.operands[1:]:
            acc = f"({acc} * {_c_expr(o, names)})"
        return acc
    if isinstance(e, ex.Neg):
        return f"(-{_c_expr(e.operand, names)})"
    if isinstance(e, ex.Div):
        return f"({_c_expr(e.num, names)} / {_c_expr(e.den, names)})"
    if isinstance(e, ex.Pow):
        b = _c_expr(e.base, names)
        acc = b if e.exponent else "1.0"
        for _ in range(abs(e.exponent) - 1):
            acc = f"({acc} * {b})"
        return f"(1.0 / {acc})" if e.exponent < 0 else acc
    raise ex.NonDifferentiable(f"no C form for {type(e).__name__}")


def emit_linearization(f: Sequence[ex.Expr], x_symbols: Sequence[str], u_symbols: Sequence[str],
                       name: str = "linearize") -> LinearizationResult:
    """Symbolic ``A = df/dx`` and ``B = df/du`` plus a C function evaluating them.

    Free symbols that are neither states nor inputs become a parameter
    array ``p`` in sorted name order. ``A`` and ``B`` are written row-major.
    """
    f = [ex.as_expr(fi) for fi in f]
    xs, us = tuple(x_symbols), tuple(u_symbols)
    A = tuple(tuple(ex.differentiate(fi, x) for x in xs) for fi in f)
    B = tuple(tuple(ex.differentiate(fi, u) for u in us) for fi in f)
    free = set()
    for fi in f:
        free |= ex.free_symbols(fi)
    params = tuple(sorted(free - set(xs) - set(us)))
    names = {x: f"x[{i}]" for i, x in enumerate(xs)}
    names.update({u: f"u[{i}]" for i, u in enumerate(us)})
    names.update({q: f"p[{i}]" for i, q in enumerate(params)})
    nm = c_identifier(name)
    L = ["/* generated by blockflow; do not edit */",
         f"/* f = ({', '.join(ex.to_infix(fi) for fi in f)}) */",
         f"/* x = ({', '.join(xs)}); u = ({', '.join(us)}); p = ({', '.join(params)}) */",
         f"void {nm}(const double *x, const double *u, const double *p, double *A, double *B)",
         "{"]
    used = " ".join(_c_expr(e, names) for row in A + B for e in row)
    for arr in ("x", "u", "p"):
        if f"{arr}[" not in used:
            L.append(f"    (void){arr};")
    for i, row in enumerate(A):
        for j, e in enumerate(row):
            L.append(f"    A[{i * len(xs) + j}] = {_c_expr(e, names)};")
    for i, row in enumerate(B):
        for j, e in enumerate(row):
            L.append(f"    B[{i * len(us) + j}] = {_c_expr(e, names)};")
    if not us:
        L.append("    (void)B;")
    L.append("}")
    L.append("")
    return LinearizationResult(A, B, xs, us, params, "\n".join(L))
