"""Small symbolic algebra engine used for loop residuals, Jacobians and linearization.

Expressions are immutable trees built from seven node kinds:
``Const``, ``Var``, ``Add``, ``Mul``, ``Neg``, ``Div`` and ``Pow`` (integer
exponents only). Python operators build raw, unsimplified trees::

    >>> S, G, C = Var("S"), Var("G"), Var("C")
    >>> to_infix(simplify(differentiate(C + G * S - S, "S")))
    '(G - 1)'
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from numbers import Real
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple


class ExprError(Exception):
    """Base class for expression errors."""


class NonDifferentiable(ExprError):
    """Raised when differentiation meets a node kind with no rule."""


class UnboundSymbol(ExprError):
    """Raised when evaluation meets a variable with no binding."""

    def __init__(self, name: str):
        super().__init__(f"unbound symbol {name!r}")
        self.name = name


class EvalSingularity(ExprError, ZeroDivisionError):
    """Raised on division by zero during evaluation."""


class Expr:
    """Base class of all expression nodes."""

    __slots__ = ()

    def __add__(self, other):
        return Add((self, as_expr(other)))

    def __radd__(self, other):
        return Add((as_expr(other), self))

    def __sub__(self, other):
        return Add((self, Neg(as_expr(other))))

    def __rsub__(self, other):
        return Add((as_expr(other), Neg(self)))

    def __mul__(self, other):
        return Mul((self, as_expr(other)))

    def __rmul__(self, other):
        return Mul((as_expr(other), self))

    def __truediv__(self, other):
        return Div(self, as_expr(other))

    def __rtruediv__(self, other):
        return Div(as_expr(other), self)

    def __neg__(self):
        return Neg(self)

    def __pow__(self, k):
        if isinstance(k, bool) or not isinstance(k, int):
            raise TypeError("only integer exponents are supported")
        return Pow(self, k)

    def __str__(self):
        return to_infix(self)


@dataclass(frozen=True, eq=True, repr=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True, eq=True, repr=True)
class Var(Expr):
    name: str


@dataclass(frozen=True, eq=True, repr=True)
class Add(Expr):
    operands: Tuple[Expr, ...]

    def __post_init__(self):
        object.__setattr__(self, "operands", tuple(self.operands))
        if len(self.operands) < 2:
            raise ValueError("Add needs at least two operands")


@dataclass(frozen=True, eq=True, repr=True)
class Mul(Expr):
    operands: Tuple[Expr, ...]

    def __post_init__(self):
        object.__setattr__(self, "operands", tuple(self.operands))
        if len(self.operands) < 2:
            raise ValueError("Mul needs at least two operands")


@dataclass(frozen=True, eq=True, repr=True)
class Neg(Expr):
    operand: Expr


@dataclass(frozen=True, eq=True, repr=True)
class Div(Expr):
    num: Expr
    den: Expr

    def __post_init__(self):
        if isinstance(self.den, Const) and self.den.value == 0.0:
            raise ValueError("Div denominator is the literal constant 0")


@dataclass(frozen=True, eq=True, repr=True)
class Pow(Expr):
    base: Expr
    exponent: int

    def __post_init__(self):
        if isinstance(self.exponent, bool) or not isinstance(self.exponent, int):
            raise TypeError("Pow exponent must be an int")


ZERO = Const(0.0)
ONE = Const(1.0)

# Alias kept for readers coming from the data model description.
ExprNode = Expr


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, Real):
        return Const(float(x))
    if isinstance(x, str):
        return Var(x)
    raise TypeError(f"cannot convert {type(x).__name__} to an expression")


@dataclass
class SymbolTable:
    """Numeric bindings for symbols, plus where each symbol came from.

    ``provenance`` maps a symbol to ``(block_id, slot_index)`` so loop
    unknowns can be traced back to diagram signals.
    """

    bindings: Dict[str, float] = field(default_factory=dict)
    provenance: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    def bind(self, name: str, value: float, provenance: Optional[Tuple[int, int]] = None):
        self.bindings[name] = float(value)
        if provenance is not None:
            self.provenance[name] = provenance
        return self

    def update(self, values: Mapping[str, float]):
        for k, v in values.items():
            self.bindings[k] = float(v)
        return self

    def copy(self) -> "SymbolTable":
        return SymbolTable(dict(self.bindings), dict(self.provenance))

    def __getitem__(self, name: str) -> float:
        try:
            return self.bindings[name]
        except KeyError:
            raise UnboundSymbol(name) from None

    def __contains__(self, name) -> bool:
        return name in self.bindings


# ---------------------------------------------------------------------------
# traversal helpers


def free_symbols(e: Expr) -> set:
    out = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            out.add(n.name)
        elif isinstance(n, (Add, Mul)):
            stack.extend(n.operands)
        elif isinstance(n, Neg):
            stack.append(n.operand)
        elif isinstance(n, Div):
            stack.append(n.num)
            stack.append(n.den)
        elif isinstance(n, Pow):
            stack.append(n.base)
    return out


def substitute(e: Expr, name: str, replacement) -> Expr:
    """Replace every ``Var(name)`` in ``e`` by ``replacement``."""
    r = as_expr(replacement)
    return substitute_many(e, {name: r})


def substitute_many(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Const):
        return e
    if isinstance(e, Add):
        return Add(tuple(substitute_many(o, mapping) for o in e.operands))
    if isinstance(e, Mul):
        return Mul(tuple(substitute_many(o, mapping) for o in e.operands))
    if isinstance(e, Neg):
        return Neg(substitute_many(e.operand, mapping))
    if isinstance(e, Div):
        return Div(substitute_many(e.num, mapping), substitute_many(e.den, mapping))
    if isinstance(e, Pow):
        return Pow(substitute_many(e.base, mapping), e.exponent)
    raise ExprError(f"unsupported node {type(e).__name__}")


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expr, table) -> float:
    """Evaluate ``e`` in double precision.

    ``table`` is a :class:`SymbolTable` or any mapping from names to floats.
    Sums and products are accumulated left to right.
    """
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return float(table[e.name])
        except KeyError:
            raise UnboundSymbol(e.name) from None
    if isinstance(e, Add):
        ops = e.operands
        acc = evaluate(ops[0], table)
        for o in ops[1:]:
            acc = acc + evaluate(o, table)
        return acc
    if isinstance(e, Mul):
        ops = e.operands
        acc = evaluate(ops[0], table)
        for o in ops[1:]:
            acc = acc * evaluate(o, table)
        return acc
    if isinstance(e, Neg):
        return -evaluate(e.operand, table)
    if isinstance(e, Div):
        n = evaluate(e.num, table)
        d = evaluate(e.den, table)
        if d == 0.0:
            raise EvalSingularity(f"division by zero in {to_infix(e)}")
        return n / d
    if isinstance(e, Pow):
        b = evaluate(e.base, table)
        k = e.exponent
        if k < 0:
            if b == 0.0:
                raise EvalSingularity(f"zero raised to negative power in {to_infix(e)}")
            return 1.0 / _ipow(b, -k)
        return _ipow(b, k)
    raise ExprError(f"unsupported node {type(e).__name__}")


def _ipow(b: float, k: int) -> float:
    # repeated multiplication keeps results identical to the lowered code
    acc = 1.0
    for _ in range(k):
        acc = acc * b
    return acc


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expr, name: str) -> Expr:
    """Exact partial derivative of ``e`` with respect to ``name``, simplified."""
    return simplify(_diff(e, name))


def _diff(e: Expr, v: str) -> Expr:
    rule = _DIFF_RULES.get(type(e))
    if rule is None:
        raise NonDifferentiable(f"no differentiation rule for node {type(e).__name__}: {e!r}")
    return rule(e, v)


def _d_add(e: Add, v):
    return Add(tuple(_diff(o, v) for o in e.operands))


def _d_mul(e: Mul, v):
    ops = e.operands
    terms = []
    for i in range(len(ops)):
        factors = list(ops)
        factors[i] = _diff(ops[i], v)
        terms.append(Mul(tuple(factors)))
    return terms[0] if len(terms) == 1 else Add(tuple(terms))


def _d_div(e: Div, v):
    dn = _diff(e.num, v)
    dd = _diff(e.den, v)
    top = Add((Mul((dn, e.den)), Neg(Mul((e.num, dd)))))
    return Div(top, Pow(e.den, 2))


def _d_pow(e: Pow, v):
    k = e.exponent
    if k == 0:
        return ZERO
    return Mul((Const(k), Pow(e.base, k - 1), _diff(e.base, v)))


_DIFF_RULES: Dict[type, Callable] = {
    Const: lambda e, v: ZERO,
    Var: lambda e, v: ONE if e.name == v else ZERO,
    Add: _d_add,
    Mul: _d_mul,
    Neg: lambda e, v: Neg(_diff(e.operand, v)),
    Div: _d_div,
    Pow: _d_pow,
}


# ---------------------------------------------------------------------------
# simplification


def simplify(e: Expr) -> Expr:
    """Constant folding, identity elimination, flattening and like-term collection.

    This is not a canonical form. The only promise is that the result
    evaluates to the same number as ``e`` wherever ``e`` is defined.
    """
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Add):
        return _simplify_add(e.operands)
    if isinstance(e, Mul):
        return _simplify_mul(e.operands)
    if isinstance(e, Neg):
        return _negate(simplify(e.operand))
    if isinstance(e, Div):
        return _simplify_div(e)
    if isinstance(e, Pow):
        return _simplify_pow(simplify(e.base), e.exponent)
    raise ExprError(f"unsupported node {type(e).__name__}")


def _split_coeff(t: Expr) -> Tuple[float, Expr]:
    """Split a simplified term into (numeric coefficient, symbolic rest)."""
    if isinstance(t, Neg):
        c, rest = _split_coeff(t.operand)
        return -c, rest
    if isinstance(t, Mul) and isinstance(t.operands[0], Const):
        rest = t.operands[1:]
        return t.operands[0].value, rest[0] if len(rest) == 1 else Mul(rest)
    return 1.0, t


def _scale(c: float, rest: Expr) -> Expr:
    if c == 1.0:
        return rest
    if c == -1.0:
        return Neg(rest)
    factors = rest.operands if isinstance(rest, Mul) else (rest,)
    return Mul((Const(c),) + tuple(factors))


def _simplify_add(operands) -> Expr:
    terms = []
    for o in operands:
        s = simplify(o)
        if isinstance(s, Add):
            terms.extend(s.operands)
        else:
            terms.append(s)

    const = 0.0
    coeffs: Dict[Expr, float] = {}
    for t in terms:
        if isinstance(t, Const):
            const += t.value
            continue
        c, rest = _split_coeff(t)
        coeffs[rest] = coeffs.get(rest, 0.0) + c

    out = [_scale(c, r) for r, c in coeffs.items() if c != 0.0]
    if const != 0.0 or not out:
        out.append(Const(const))
    return out[0] if len(out) == 1 else Add(tuple(out))


def _simplify_mul(operands) -> Expr:
    const = 1.0
    powers: Dict[Expr, int] = {}
    stack = [simplify(o) for o in operands]
    stack.reverse()
    while stack:
        f = stack.pop()
        if isinstance(f, Mul):
            stack.extend(reversed(f.operands))
        elif isinstance(f, Neg):
            const = -const
            stack.append(f.operand)
        elif isinstance(f, Const):
            const *= f.value
        elif isinstance(f, Pow):
            powers[f.base] = powers.get(f.base, 0) + f.exponent
        else:
            powers[f] = powers.get(f, 0) + 1

    if const == 0.0:
        return ZERO
    factors = []
    for base, k in powers.items():
        if k == 0:
            continue
        factors.append(base if k == 1 else Pow(base, k))
    if not factors:
        return Const(const)
    rest = factors[0] if len(factors) == 1 else Mul(tuple(factors))
    return _scale(const, rest)


def _negate(s: Expr) -> Expr:
    if isinstance(s, Const):
        return Const(-s.value)
    if isinstance(s, Neg):
        return s.operand
    if isinstance(s, Add):
        return _simplify_add([Neg(t) for t in s.operands])
    c, rest = _split_coeff(s)
    if rest is s:
        return Neg(s)
    return _scale(-c, rest)


def _simplify_div(e: Div) -> Expr:
    n = simplify(e.num)
    d = simplify(e.den)
    if isinstance(d, Const):
        if d.value == 0.0:
            # singular everywhere; keep the original denominator so the
            # node stays constructible and evaluation still raises
            return Div(n, e.den)
        if d.value == 1.0:
            return n
        if isinstance(n, Const):
            return Const(n.value / d.value)
    if isinstance(n, Const) and n.value == 0.0:
        return ZERO
    return Div(n, d)


def _simplify_pow(b: Expr, k: int) -> Expr:
    if k == 0:
        return ONE
    if k == 1:
        return b
    if isinstance(b, Const):
        if b.value == 0.0 and k < 0:
            return Pow(b, k)
        return Const(1.0 / _ipow(b.value, -k) if k < 0 else _ipow(b.value, k))
    if isinstance(b, Pow):
        return _simplify_pow(b.base, b.exponent * k)
    if isinstance(b, Neg) and k % 2 == 0:
        return Pow(b.operand, k)
    return Pow(b, k)


# ---------------------------------------------------------------------------
# printing


def format_number(v: float) -> str:
    if math.isfinite(v) and v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_infix(e: Expr) -> str:
    """Infix text with explicit parentheses, e.g. ``(C + (G * S))``."""
    if isinstance(e, Const):
        return format_number(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Add):
        parts = [to_infix(e.operands[0])]
        for t in e.operands[1:]:
            if isinstance(t, Neg):
                parts.append(f"- {to_infix(t.operand)}")
            elif isinstance(t, Const) and t.value < 0:
                parts.append(f"- {format_number(-t.value)}")
            else:
                parts.append(f"+ {to_infix(t)}")
        return "(" + " ".join(parts) + ")"
    if isinstance(e, Mul):
        return "(" + " * ".join(to_infix(o) for o in e.operands) + ")"
    if isinstance(e, Neg):
        return f"(-{to_infix(e.operand)})"
    if isinstance(e, Div):
        return f"({to_infix(e.num)} / {to_infix(e.den)})"
    if isinstance(e, Pow):
        return f"({to_infix(e.base)} ^ {e.exponent})"
    raise ExprError(f"unsupported node {type(e).__name__}")


def symbols(names: str) -> Tuple[Var, ...]:
    """``symbols("x y z")`` -> ``(Var('x'), Var('y'), Var('z'))``."""
    return tuple(Var(n) for n in names.replace(",", " ").split())


def node_count(e: Expr) -> int:
    if isinstance(e, (Add, Mul)):
        return 1 + sum(node_count(o) for o in e.operands)
    if isinstance(e, Neg):
        return 1 + node_count(e.operand)
    if isinstance(e, Div):
        return 1 + node_count(e.num) + node_count(e.den)
    if isinstance(e, Pow):
        return 1 + node_count(e.base)
    return 1


def iter_nodes(e: Expr) -> Iterable[Expr]:
    yield e
    if isinstance(e, (Add, Mul)):
        for o in e.operands:
            yield from iter_nodes(o)
    elif isinstance(e, Neg):
        yield from iter_nodes(e.operand)
    elif isinstance(e, Div):
        yield from iter_nodes(e.num)
        yield from iter_nodes(e.den)
    elif isinstance(e, Pow):
        yield from iter_nodes(e.base)
