"""Algebraic loop solving: residual extraction, symbolic Jacobian, Newton iteration.

A loop cluster is torn at a set of *unknown* signals ``x``. Every other
signal inside the loop is expanded symbolically in terms of ``x``, the
external inputs and the block parameters, which gives one residual per
unknown::

    f_i(x) = output_of_driving_block(expanded inputs) - x_i

Each cycle ``f(x) = 0`` is solved by Newton-Raphson, with the Jacobian
evaluated from its symbolic form and a dense Gaussian elimination solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

from . import expr as ex

logger = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-12


class LoopSolveError(Exception):
    """Base class for loop solver failures."""


class SymbolicallyUnsolvableLoop(LoopSolveError):
    def __init__(self, block_id: int, message: str = ""):
        super().__init__(message or f"block #{block_id} has no symbolic description and sits inside an algebraic loop")
        self.block_id = block_id


class SingularJacobian(LoopSolveError):
    pass


class LoopDivergence(LoopSolveError):
    def __init__(self, residual_norm: float, iterations: int):
        super().__init__(f"Newton iteration did not converge after {iterations} iterations (|f|inf = {residual_norm:.3e})")
        self.residual_norm = residual_norm
        self.iterations = iterations


@dataclass(frozen=True)
class NewtonConfig:
    tolerance: float = 1e-10
    max_iterations: int = 50
    initial_guess: str = "warm"  # "warm" or "zeros"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.initial_guess not in ("warm", "zeros"):
            raise ValueError("initial_guess must be 'warm' or 'zeros'")


@dataclass(frozen=True)
class LoopCluster:
    """A strongly connected group of direct-feedthrough blocks.

    ``unknowns`` and ``external_inputs`` pair a symbol name with the output
    slot carrying that signal. Slots are ``graph.SlotRef`` values.
    """

    member_blocks: Tuple[int, ...]
    member_edges: Tuple = ()
    unknowns: Tuple[Tuple[str, object], ...] = ()
    external_inputs: Tuple[Tuple[str, object], ...] = ()

    def __post_init__(self):
        if not self.unknowns:
            raise ValueError("a loop cluster needs at least one unknown")

    @property
    def unknown_symbols(self) -> Tuple[str, ...]:
        return tuple(s for s, _ in self.unknowns)

    def __str__(self):
        return "LoopCluster{" + ",".join(str(b) for b in self.member_blocks) + "}"


@dataclass(frozen=True)
class ResidualSystem:
    unknowns: Tuple[str, ...]
    residuals: Tuple[ex.Expr, ...]
    jacobian: Tuple[Tuple[ex.Expr, ...], ...]
    config: NewtonConfig = field(default_factory=NewtonConfig)
    parameters: Mapping[str, float] = field(default_factory=dict)
    external_inputs: Tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.unknowns)
        if len(self.residuals) != n or len(self.jacobian) != n or any(len(r) != n for r in self.jacobian):
            raise ValueError("residual system dimensions do not match the unknowns")

    @property
    def size(self) -> int:
        return len(self.unknowns)

    def dump(self) -> str:
        lines = [f"unknowns: {', '.join(self.unknowns)}"]
        for name, f in zip(self.unknowns, self.residuals):
            lines.append(f"f[{name}] = {ex.to_infix(f)}")
        for i, row in enumerate(self.jacobian):
            for j, entry in enumerate(row):
                lines.append(f"J[{i},{j}] = {ex.to_infix(entry)}")
        return "\n".join(lines)


@dataclass(frozen=True)
class LoopSolution:
    values: Tuple[float, ...]
    iterations: int
    residual_norm: float


def build_residual_system(outputs: Mapping[str, ex.Expr], config: Optional[NewtonConfig] = None,
                          parameters: Optional[Mapping[str, float]] = None,
                          external_inputs: Sequence[str] = ()) -> ResidualSystem:
    """Residual system for ``x_i = outputs[x_i]`` with a simplified symbolic Jacobian."""
    names = tuple(outputs)
    residuals = tuple(ex.simplify(ex.Add((outputs[n], ex.Neg(ex.Var(n))))) for n in names)
    jac = tuple(tuple(ex.differentiate(f, n) for n in names) for f in residuals)
    return ResidualSystem(names, residuals, jac, config or NewtonConfig(),
                          dict(parameters or {}), tuple(external_inputs))


def extract_residual_system(cluster: LoopCluster, diagram, config: Optional[NewtonConfig] = None) -> ResidualSystem:
    """Expand the cluster's signals symbolically and build ``f(x) = 0``.

    Raises :class:`SymbolicallyUnsolvableLoop` if a member block cannot
    describe itself symbolically.
    """
    members = set(cluster.member_blocks)
    for bid in cluster.member_blocks:
        if not diagram.blocks[bid].symbolic_capable:
            raise SymbolicallyUnsolvableLoop(bid)

    unknown_of = {slot: sym for sym, slot in cluster.unknowns}
    external_of = {slot: sym for sym, slot in cluster.external_inputs}
    parameters: Dict[str, float] = {}
    param_syms: Dict[int, Dict[str, ex.Expr]] = {}
    for bid in cluster.member_blocks:
        block = diagram.blocks[bid]
        syms = {}
        for pname, value in block.symbolic_parameters().items():
            sym = diagram.parameter_symbol(bid, pname)
            parameters[sym] = float(value)
            syms[pname] = ex.Var(sym)
        param_syms[bid] = syms

    cache: Dict[int, Tuple[ex.Expr, ...]] = {}
    visiting = set()

    def block_outputs(bid: int) -> Tuple[ex.Expr, ...]:
        if bid in cache:
            return cache[bid]
        if bid in visiting:
            raise LoopSolveError(f"unknowns do not tear every cycle through block #{bid}")
        visiting.add(bid)
        block = diagram.blocks[bid]
        ins = tuple(signal(diagram.driver(diagram.input_slot(bid, k))) for k in range(block.n_in))
        outs = tuple(block.symbolic(ins, param_syms[bid]))
        visiting.discard(bid)
        cache[bid] = outs
        return outs

    def signal(src) -> ex.Expr:
        if src in unknown_of:
            return ex.Var(unknown_of[src])
        if src.block_id not in members:
            if src not in external_of:
                raise LoopSolveError(f"signal {src} enters the loop but is not a declared external input")
            return ex.Var(external_of[src])
        return block_outputs(src.block_id)[src.index]

    outputs = {}
    for sym, slot in cluster.unknowns:
        outputs[sym] = block_outputs(slot.block_id)[slot.index]
    rs = build_residual_system(outputs, config, parameters, tuple(s for s, _ in cluster.external_inputs))
    logger.debug("residual system for %s:\n%s", cluster, rs.dump())
    return rs


# ---------------------------------------------------------------------------
# numerics


def gauss_solve(a: Sequence[Sequence[float]], b: Sequence[float], pivot_tolerance: float = PIVOT_TOLERANCE):
    """Solve ``a x = b`` by Gaussian elimination with partial pivoting.

    A pivot smaller than ``pivot_tolerance`` times the largest entry of its
    original row raises :class:`SingularJacobian`.
    """
    n = len(b)
    m = [list(map(float, row)) for row in a]
    rhs = [float(v) for v in b]
    scale = [max((abs(v) for v in row), default=0.0) for row in m]

    for k in range(n):
        p = k
        best = abs(m[k][k])
        for r in range(k + 1, n):
            v = abs(m[r][k])
            if v > best:
                best, p = v, r
        if p != k:
            m[k], m[p] = m[p], m[k]
            rhs[k], rhs[p] = rhs[p], rhs[k]
            scale[k], scale[p] = scale[p], scale[k]
        if scale[k] == 0.0 or best < pivot_tolerance * scale[k]:
            raise SingularJacobian(f"pivot {best:.3e} at column {k} is below {pivot_tolerance:g} of its row scale")
        piv = m[k][k]
        for r in range(k + 1, n):
            factor = m[r][k] / piv
            if factor != 0.0:
                row_r, row_k = m[r], m[k]
                for c in range(k + 1, n):
                    row_r[c] = row_r[c] - factor * row_k[c]
                rhs[r] = rhs[r] - factor * rhs[k]
            m[r][k] = 0.0

    x = [0.0] * n
    for k in range(n - 1, -1, -1):
        acc = rhs[k]
        for c in range(k + 1, n):
            acc = acc - m[k][c] * x[c]
        x[k] = acc / m[k][k]
    return x


def _table(rs: ResidualSystem, x, bindings) -> Dict[str, float]:
    if isinstance(bindings, ex.SymbolTable):
        vals = dict(bindings.bindings)
    else:
        vals = dict(bindings or {})
    for k, v in rs.parameters.items():
        vals.setdefault(k, v)
    for name, v in zip(rs.unknowns, x):
        vals[name] = float(v)
    return vals


def residual_values(rs: ResidualSystem, x, bindings) -> list:
    vals = _table(rs, x, bindings)
    return [ex.evaluate(f, vals) for f in rs.residuals]


def jacobian_values(rs: ResidualSystem, x, bindings) -> list:
    vals = _table(rs, x, bindings)
    return [[ex.evaluate(e, vals) for e in row] for row in rs.jacobian]


def newton_step(rs: ResidualSystem, x, bindings) -> list:
    """One step ``x + dx`` with ``J(x) dx = -f(x)``."""
    vals = _table(rs, x, bindings)
    f = [ex.evaluate(e, vals) for e in rs.residuals]
    jac = [[ex.evaluate(e, vals) for e in row] for row in rs.jacobian]
    dx = gauss_solve(jac, [-v for v in f])
    return [xi + di for xi, di in zip(x, dx)]


def solve_loop(rs: ResidualSystem, bindings, x0=None) -> LoopSolution:
    """Iterate Newton steps until ``max|f(x)| <= tolerance``.

    ``x0`` defaults to zeros. Raises :class:`LoopDivergence` when the
    iteration budget runs out and :class:`SingularJacobian` from the solve.
    """
    cfg = rs.config
    x = [0.0] * rs.size if x0 is None else [float(v) for v in x0]
    vals = _table(rs, x, bindings)
    names = rs.unknowns

    def norm_at(xs):
        for name, v in zip(names, xs):
            vals[name] = v
        f = [ex.evaluate(e, vals) for e in rs.residuals]
        return f, max((abs(v) for v in f), default=0.0)

    f, norm = norm_at(x)
    it = 0
    while not norm <= cfg.tolerance:
        if it >= cfg.max_iterations:
            raise LoopDivergence(norm, it)
        jac = [[ex.evaluate(e, vals) for e in row] for row in rs.jacobian]
        dx = gauss_solve(jac, [-v for v in f])
        x = [xi + di for xi, di in zip(x, dx)]
        it += 1
        f, norm = norm_at(x)
    return LoopSolution(tuple(x), it, norm)
