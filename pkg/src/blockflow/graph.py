"""Diagram model: blocks, ports, connections, validation, scheduling and execution.

A :class:`Block` subclass is the unit of extension. It declares its kind
name, whether it has direct feedthrough, whether it can describe itself
symbolically, and its per-cycle behaviour. Registering it with
:func:`register_block` makes it available to diagram files.

Execution of one cycle has two phases. First every schedule item computes
its outputs in order (direct-feedthrough blocks read current inputs,
indirect blocks only read their state). Then every block commits its new
state from the inputs seen in that cycle.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import expr as ex
from .loopsolve import (LoopCluster, LoopSolveError, NewtonConfig, extract_residual_system,
                        solve_loop)

logger = logging.getLogger(__name__)


class GraphError(Exception):
    """Base class for diagram construction and execution errors."""


class UnknownBlock(GraphError):
    pass


class InvalidSlot(GraphError):
    pass


class IllegalPortPairing(GraphError):
    pass


class MultipleDrivers(GraphError):
    pass


class TypeMismatch(GraphError):
    pass


class UnresolvableCycle(GraphError):
    pass


class DiagramInvalid(GraphError):
    def __init__(self, report: "ValidationReport"):
        super().__init__("diagram is not executable:\n" + str(report))
        self.report = report


class CycleAborted(GraphError):
    """A block (or loop cluster) failed during a cycle."""

    def __init__(self, block_ids: Sequence[int], cause: Exception):
        ids = ", ".join(f"#{b}" for b in block_ids)
        super().__init__(f"cycle aborted in block(s) {ids}: {cause}")
        self.block_ids = tuple(block_ids)
        self.cause = cause


# ---------------------------------------------------------------------------
# value types and slots


@dataclass(frozen=True)
class ValueType:
    kind: str = "scalar"
    shape: Tuple[int, ...] = ()

    def __str__(self):
        if self.kind in ("scalar", "image"):
            return self.kind
        return f"{self.kind}({','.join(map(str, self.shape))})"

    @classmethod
    def parse(cls, text: str) -> "ValueType":
        text = text.strip()
        if text in ("scalar", "image"):
            return cls(text)
        m = re.fullmatch(r"(vector|matrix)\(\s*(\d+)\s*(?:,\s*(\d+)\s*)?\)", text)
        if not m:
            raise ValueError(f"bad value type {text!r}")
        kind, a, b = m.groups()
        if kind == "vector" and b is None:
            return cls("vector", (int(a),))
        if kind == "matrix" and b is not None:
            return cls("matrix", (int(a), int(b)))
        raise ValueError(f"bad value type {text!r}")

    @classmethod
    def of(cls, value) -> "ValueType":
        arr = np.asarray(value)
        if arr.ndim == 0:
            return SCALAR
        if arr.ndim == 1:
            return vector(arr.shape[0])
        return matrix(*arr.shape)


SCALAR = ValueType("scalar")
IMAGE = ValueType("image")


def vector(n: int) -> ValueType:
    return ValueType("vector", (int(n),))


def matrix(n: int, m: int) -> ValueType:
    return ValueType("matrix", (int(n), int(m)))


class Port(str, Enum):
    INPUT = "input"
    OUTPUT = "output"
    PARAMETER = "parameter"


class SlotRef(NamedTuple):
    block_id: int
    port: Port
    index: int

    def __str__(self):
        short = {Port.INPUT: "in", Port.OUTPUT: "out", Port.PARAMETER: "param"}[self.port]
        return f"#{self.block_id}.{short}{self.index}"


@dataclass(frozen=True)
class SignalEdge:
    source: SlotRef
    sink: SlotRef
    value_type: ValueType = SCALAR


@dataclass(frozen=True)
class BlockSpec:
    block_id: int
    kind: str
    input_arity: int
    output_arity: int
    direct_feedthrough: bool
    symbolic_capable: bool
    state_size: int


# ---------------------------------------------------------------------------
# blocks


BLOCK_REGISTRY: Dict[str, type] = {}


def register_block(cls):
    """Class decorator making a block kind available by name.

    The class must set ``kind`` and ``direct_feedthrough``. Blocks that set
    ``symbolic_capable`` must also implement :meth:`Block.symbolic`.
    """
    kind = cls.__dict__.get("kind")
    if not kind or not isinstance(kind, str):
        raise TypeError(f"{cls.__name__} must declare a 'kind' name")
    if not isinstance(getattr(cls, "direct_feedthrough", None), bool):
        raise TypeError(f"{cls.__name__} must declare direct_feedthrough as a bool")
    if kind in BLOCK_REGISTRY and BLOCK_REGISTRY[kind] is not cls:
        raise ValueError(f"block kind {kind!r} already registered")
    BLOCK_REGISTRY[kind] = cls
    return cls


class Block:
    """Base class of every block kind.

    Subclasses call ``super().__init__`` with their port types and a dict of
    the constructor parameters (used for dumping diagrams back to text).
    """

    kind = "Block"
    direct_feedthrough = True
    symbolic_capable = False
    lowerable = False
    stateful = False

    def __init__(self, input_types: Sequence[ValueType], output_types: Sequence[ValueType],
                 params: Optional[dict] = None, state_size: int = 0):
        self.input_types = tuple(input_types)
        self.output_types = tuple(output_types)
        self.params = dict(params or {})
        self.state_size = state_size
        self.id: Optional[int] = None
        self.name: Optional[str] = None

    @property
    def n_in(self) -> int:
        return len(self.input_types)

    @property
    def n_out(self) -> int:
        return len(self.output_types)

    # slot accessors in the style blk.i(0), blk.o(0), blk.p(0)
    def _slot(self, port: Port, index: int) -> SlotRef:
        if self.id is None:
            raise GraphError(f"{self.kind} block is not part of a diagram")
        arity = {Port.INPUT: self.n_in, Port.OUTPUT: self.n_out, Port.PARAMETER: len(self.params)}[port]
        if not 0 <= index < arity:
            raise InvalidSlot(f"{self.label}: {port.value} slot {index} out of range (arity {arity})")
        return SlotRef(self.id, port, index)

    def i(self, index: int = 0) -> SlotRef:
        return self._slot(Port.INPUT, index)

    def o(self, index: int = 0) -> SlotRef:
        return self._slot(Port.OUTPUT, index)

    def p(self, index: int = 0) -> SlotRef:
        return self._slot(Port.PARAMETER, index)

    @property
    def label(self) -> str:
        return f"{self.name or self.kind}#{self.id}"

    def spec(self) -> BlockSpec:
        return BlockSpec(self.id, self.kind, self.n_in, self.n_out, self.direct_feedthrough,
                         self.symbolic_capable, self.state_size)

    # per-cycle behaviour ---------------------------------------------------
    def init_state(self, seed=None):
        return None

    def output(self, state, inputs):
        """Outputs for this cycle. ``inputs`` is None for indirect blocks."""
        raise NotImplementedError

    def update(self, state, inputs):
        return state

    # symbolic description ---------------------------------------------------
    def symbolic(self, inputs: Sequence[ex.Expr], params) -> Tuple[ex.Expr, ...]:
        raise NotImplementedError(f"{self.kind} has no symbolic description")

    def symbolic_parameters(self) -> Dict[str, float]:
        return {}

    # validation ---------------------------------------------------------------
    def check(self) -> List[str]:
        return []

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"{type(self).__name__}({args})"


# ---------------------------------------------------------------------------
# diagram


class Diagram:
    """Blocks plus signal edges. Block ids are assigned from 1 in insertion order."""

    def __init__(self):
        self.blocks: Dict[int, Block] = {}
        self.edges: Dict[SlotRef, SignalEdge] = {}  # keyed by sink
        self._by_name: Dict[str, int] = {}
        self._next_id = 1

    def add(self, block: Block, name: Optional[str] = None) -> Block:
        if block.id is not None:
            raise GraphError(f"{block.label} already belongs to a diagram")
        bid = self._next_id
        self._next_id += 1
        name = name or f"{block.kind.lower()}{bid}"
        if name in self._by_name:
            raise GraphError(f"duplicate block name {name!r}")
        block.id, block.name = bid, name
        self.blocks[bid] = block
        self._by_name[name] = bid
        return block

    def __getitem__(self, name_or_id) -> Block:
        if isinstance(name_or_id, str):
            try:
                return self.blocks[self._by_name[name_or_id]]
            except KeyError:
                raise UnknownBlock(f"no block named {name_or_id!r}") from None
        try:
            return self.blocks[name_or_id]
        except KeyError:
            raise UnknownBlock(f"no block #{name_or_id}") from None

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def _arity(self, slot: SlotRef) -> int:
        block = self.blocks.get(slot.block_id)
        if block is None:
            raise UnknownBlock(f"no block #{slot.block_id}")
        return {Port.INPUT: block.n_in, Port.OUTPUT: block.n_out, Port.PARAMETER: len(block.params)}[slot.port]

    def slot_type(self, slot: SlotRef) -> ValueType:
        block = self.blocks[slot.block_id]
        if slot.port is Port.INPUT:
            return block.input_types[slot.index]
        if slot.port is Port.OUTPUT:
            return block.output_types[slot.index]
        raise IllegalPortPairing("parameters carry no signal type")

    def connect(self, source: SlotRef, sink: SlotRef) -> SignalEdge:
        """Wire an output slot to an input slot."""
        for s in (source, sink):
            if not 0 <= s.index < self._arity(s):
                raise InvalidSlot(f"{s} is out of range")
        if source.port is not Port.OUTPUT or sink.port is not Port.INPUT:
            raise IllegalPortPairing(f"cannot connect {source.port.value} {source} to {sink.port.value} {sink}; "
                                     "only output -> input is allowed")
        if sink in self.edges:
            raise MultipleDrivers(f"{sink} is already driven by {self.edges[sink].source}")
        st, kt = self.slot_type(source), self.slot_type(sink)
        if st != kt:
            raise TypeMismatch(f"{source} carries {st} but {sink} expects {kt}")
        edge = SignalEdge(source, sink, st)
        self.edges[sink] = edge
        return edge

    def set_param(self, block, key: str, value):
        """Rebuild a block with one parameter changed (parameters are fixed once running)."""
        block = self[block] if isinstance(block, (str, int)) else block
        params = dict(block.params)
        params[key] = value
        new = type(block)(**params)
        new.id, new.name = block.id, block.name
        self.blocks[block.id] = new
        return new

    def driver(self, sink: SlotRef) -> Optional[SlotRef]:
        edge = self.edges.get(sink)
        return edge.source if edge else None

    def consumers(self, source: SlotRef) -> List[SlotRef]:
        return sorted((e.sink for e in self.edges.values() if e.source == source),
                      key=lambda s: (s.block_id, s.index))

    @staticmethod
    def input_slot(block_id: int, k: int) -> SlotRef:
        return SlotRef(block_id, Port.INPUT, k)

    @staticmethod
    def output_slot(block_id: int, k: int) -> SlotRef:
        return SlotRef(block_id, Port.OUTPUT, k)

    def sorted_edges(self) -> List[SignalEdge]:
        return sorted(self.edges.values(), key=lambda e: (e.sink.block_id, e.sink.index))

    def signal_symbol(self, slot: SlotRef) -> str:
        return f"{self.blocks[slot.block_id].name}.out{slot.index}"

    def parameter_symbol(self, block_id: int, pname: str) -> str:
        return f"{self.blocks[block_id].name}.{pname}"

    def specs(self) -> List[BlockSpec]:
        return [self.blocks[b].spec() for b in sorted(self.blocks)]


def connect(diagram: Diagram, source: SlotRef, sink: SlotRef) -> SignalEdge:
    return diagram.connect(source, sink)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    slot: Optional[SlotRef] = None

    def __str__(self):
        return f"[{self.code}] {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: Tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __iter__(self):
        return iter(self.violations)

    def __len__(self):
        return len(self.violations)

    def __str__(self):
        return "\n".join(str(v) for v in self.violations) or "ok"


def validate_diagram(d: Diagram) -> ValidationReport:
    """Collect every reason the diagram cannot run. Empty report means executable."""
    out: List[Violation] = []
    for edge in d.sorted_edges():
        bad = False
        for s in (edge.source, edge.sink):
            if s.block_id not in d.blocks:
                out.append(Violation("dangling", f"edge endpoint {s} refers to a missing block", s))
                bad = True
            elif not 0 <= s.index < d._arity(s):
                out.append(Violation("arity", f"edge endpoint {s} is out of range", s))
                bad = True
        if bad:
            continue
        if edge.source.port is not Port.OUTPUT or edge.sink.port is not Port.INPUT:
            out.append(Violation("pairing", f"edge {edge.source} -> {edge.sink} does not go output -> input", edge.sink))
            continue
        st, kt = d.slot_type(edge.source), d.slot_type(edge.sink)
        if st != kt:
            out.append(Violation("type", f"{d.blocks[edge.sink.block_id].label} input {edge.sink.index} expects {kt} "
                                         f"but is driven with {st}", edge.sink))
    for bid in sorted(d.blocks):
        block = d.blocks[bid]
        for k in range(block.n_in):
            slot = SlotRef(bid, Port.INPUT, k)
            if slot not in d.edges:
                out.append(Violation("unbound", f"{block.label} input {k} ({slot}) is not connected", slot))
        for msg in block.check():
            out.append(Violation("block", f"{block.label}: {msg}"))
    return ValidationReport(tuple(out))


# ---------------------------------------------------------------------------
# loops and scheduling


def tarjan_scc(nodes: Iterable[int], succ: Dict[int, List[int]]) -> List[List[int]]:
    """Strongly connected components, iterative Tarjan. Components come out in reverse topological order."""
    index: Dict[int, int] = {}
    low: Dict[int, int] = {}
    on_stack = set()
    stack: List[int] = []
    counter = itertools.count()
    comps: List[List[int]] = []

    for root in nodes:
        if root in index:
            continue
        index[root] = low[root] = next(counter)
        stack.append(root)
        on_stack.add(root)
        work = [(root, iter(succ.get(root, ())))]
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = next(counter)
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ.get(w, ()))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                comps.append(sorted(comp))
    return comps


def _feedthrough_graph(d: Diagram) -> Dict[int, List[int]]:
    succ: Dict[int, List[int]] = {b: [] for b in d.blocks if d.blocks[b].direct_feedthrough}
    for edge in d.sorted_edges():
        u, v = edge.source.block_id, edge.sink.block_id
        if u in succ and v in succ and v not in succ[u]:
            succ[u].append(v)
    for u in succ:
        succ[u].sort()
    return succ


def _is_acyclic(nodes: Sequence[int], succ: Dict[int, List[int]]) -> bool:
    indeg = {n: 0 for n in nodes}
    for u in nodes:
        for v in succ.get(u, ()):
            if v in indeg:
                indeg[v] += 1
    ready = [n for n in nodes if indeg[n] == 0]
    seen = 0
    while ready:
        u = ready.pop()
        seen += 1
        for v in succ.get(u, ()):
            if v in indeg:
                indeg[v] -= 1
                if indeg[v] == 0:
                    ready.append(v)
    return seen == len(nodes)


def choose_tear_blocks(members: Sequence[int], succ: Dict[int, List[int]], exhaustive_limit: int = 12) -> Tuple[int, ...]:
    """Smallest set of member blocks whose outputs break every cycle of the cluster.

    Ties go to the lexicographically smallest block ids. Large clusters
    fall back to a greedy choice.
    """
    members = sorted(members)
    inner = {u: [v for v in succ.get(u, ()) if v in members] for u in members}

    def breaks(torn) -> bool:
        cut = {u: ([] if u in torn else inner[u]) for u in members}
        return _is_acyclic(members, cut)

    if len(members) <= exhaustive_limit:
        for k in range(1, len(members) + 1):
            for combo in itertools.combinations(members, k):
                if breaks(set(combo)):
                    return combo
    torn: set = set()
    while not breaks(torn):
        rest = [u for u in members if u not in torn]
        indeg = {u: sum(u in inner[w] for w in rest) for u in rest}
        best = max(rest, key=lambda u: (len([v for v in inner[u] if v not in torn]) * indeg[u], -u))
        torn.add(best)
    return tuple(sorted(torn))


def detect_algebraic_loops(d: Diagram) -> List[LoopCluster]:
    """SCCs (size > 1 or with a self-loop) of the direct-feedthrough subgraph."""
    succ = _feedthrough_graph(d)
    clusters = []
    for comp in tarjan_scc(sorted(succ), succ):
        if len(comp) == 1 and comp[0] not in succ[comp[0]]:
            continue
        members = set(comp)
        member_edges = tuple(e for e in d.sorted_edges()
                             if e.source.block_id in members and e.sink.block_id in members)
        torn = set(choose_tear_blocks(comp, succ))
        unknown_slots = sorted({e.source for e in member_edges if e.source.block_id in torn},
                               key=lambda s: (s.block_id, s.index))
        external = sorted({e.source for e in d.sorted_edges()
                           if e.sink.block_id in members and e.source.block_id not in members},
                          key=lambda s: (s.block_id, s.index))
        clusters.append(LoopCluster(
            member_blocks=tuple(comp),
            member_edges=member_edges,
            unknowns=tuple((d.signal_symbol(s), s) for s in unknown_slots),
            external_inputs=tuple((d.signal_symbol(s), s) for s in external),
        ))
    clusters.sort(key=lambda c: c.member_blocks[0])
    return clusters


ScheduleItem = Union[int, LoopCluster]


@dataclass(frozen=True)
class ExecutionSchedule:
    items: Tuple[ScheduleItem, ...]

    def block_order(self) -> List[int]:
        out = []
        for item in self.items:
            out.extend(item.member_blocks if isinstance(item, LoopCluster) else [item])
        return out

    def position(self, block_id: int) -> int:
        for pos, item in enumerate(self.items):
            if item == block_id or (isinstance(item, LoopCluster) and block_id in item.member_blocks):
                return pos
        raise KeyError(block_id)

    @property
    def clusters(self) -> List[LoopCluster]:
        return [i for i in self.items if isinstance(i, LoopCluster)]

    def __str__(self):
        return " -> ".join(str(i) if isinstance(i, LoopCluster) else f"#{i}" for i in self.items)


def resolve_execution_order(d: Diagram, solve_loops: bool = True,
                            clusters: Optional[Sequence[LoopCluster]] = None) -> ExecutionSchedule:
    """Topological order of the loop-condensed diagram.

    A block with direct feedthrough runs after every block driving it.
    Inputs of indirect-feedthrough blocks impose no ordering. Among
    unconstrained items the smallest block id goes first.
    """
    clusters = list(detect_algebraic_loops(d) if clusters is None else clusters)
    if clusters and not solve_loops:
        raise UnresolvableCycle("algebraic loop(s) through " +
                                "; ".join("{" + ",".join(map(str, c.member_blocks)) + "}" for c in clusters) +
                                " and loop solving is disabled")
    node_of: Dict[int, int] = {}
    items: Dict[int, ScheduleItem] = {}
    for c in clusters:
        key = min(c.member_blocks)
        items[key] = c
        for b in c.member_blocks:
            node_of[b] = key
    for b in d.blocks:
        if b not in node_of:
            node_of[b] = b
            items[b] = b

    succ: Dict[int, set] = {k: set() for k in items}
    indeg = {k: 0 for k in items}
    for edge in d.edges.values():
        u, v = node_of[edge.source.block_id], node_of[edge.sink.block_id]
        if u == v or not d.blocks[edge.sink.block_id].direct_feedthrough:
            continue
        if v not in succ[u]:
            succ[u].add(v)
            indeg[v] += 1

    heap = [k for k, n in indeg.items() if n == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        k = heapq.heappop(heap)
        order.append(items[k])
        for v in succ[k]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    if len(order) != len(items):
        stuck = sorted(k for k, n in indeg.items() if n > 0)
        raise UnresolvableCycle(f"cycle among direct-feedthrough blocks {stuck} was not condensed")
    return ExecutionSchedule(tuple(order))


# ---------------------------------------------------------------------------
# execution


def loop_plan(d: "Diagram", cluster: LoopCluster, newton: Optional[NewtonConfig] = None):
    """Residual system, member evaluation order, externals and unknown slots of a cluster."""
    rs = extract_residual_system(cluster, d, newton)
    members = set(cluster.member_blocks)
    unknown_slots = {(s.block_id, s.index) for _, s in cluster.unknowns}
    succ = {}
    for b in cluster.member_blocks:
        succ[b] = sorted({e.sink.block_id for e in cluster.member_edges
                          if e.source.block_id == b and (e.source.block_id, e.source.index) not in unknown_slots})
    # torn members in dependency order; ties by id
    indeg = {b: 0 for b in members}
    for b in members:
        for v in succ[b]:
            indeg[v] += 1
    heap = sorted(b for b in members if indeg[b] == 0)
    order = []
    while heap:
        b = heapq.heappop(heap)
        order.append(b)
        for v in succ[b]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, v)
    externals = tuple((sym, (s.block_id, s.index)) for sym, s in cluster.external_inputs)
    unknowns = tuple((s.block_id, s.index) for _, s in cluster.unknowns)
    return rs, tuple(order), externals, unknowns


class Executor:
    """Runs a validated diagram cycle by cycle.

    Owns the signal table, every block's state and the warm-start vectors of
    the loop solvers, so two executors over one diagram never interfere.
    """

    def __init__(self, diagram: Diagram, schedule: Optional[ExecutionSchedule] = None,
                 newton: Optional[NewtonConfig] = None, seed: Optional[int] = None):
        report = validate_diagram(diagram)
        if not report.ok:
            raise DiagramInvalid(report)
        self.diagram = diagram
        self.schedule = schedule or resolve_execution_order(diagram)
        self.newton = newton or NewtonConfig()
        self.seed = seed
        self.cycle = 0
        self.signals: Dict[Tuple[int, int], object] = {}

        self._sources: Dict[int, Tuple[Tuple[int, int], ...]] = {}
        for bid, block in diagram.blocks.items():
            srcs = []
            for k in range(block.n_in):
                src = diagram.edges[SlotRef(bid, Port.INPUT, k)].source
                srcs.append((src.block_id, src.index))
            self._sources[bid] = tuple(srcs)

        self._plan = []
        for item in self.schedule.items:
            if isinstance(item, LoopCluster):
                self._plan.append(("loop", item, self._loop_plan(item)))
            else:
                self._plan.append(("block", item, diagram.blocks[item]))
        self._stateful = [(bid, diagram.blocks[bid]) for bid in self.schedule.block_order()
                          if diagram.blocks[bid].stateful]
        self.reset()

    def _loop_plan(self, cluster: LoopCluster):
        return loop_plan(self.diagram, cluster, self.newton)

    def reset(self):
        seeds = np.random.SeedSequence(self.seed if self.seed is not None else 0)
        self.states = {}
        for bid in sorted(self.diagram.blocks):
            block = self.diagram.blocks[bid]
            self.states[bid] = block.init_state(np.random.SeedSequence([int(seeds.entropy), bid]))
        self.warm: Dict[int, Optional[List[float]]] = {}
        self.last_iterations: Dict[int, int] = {}
        self.signals = {}
        self.cycle = 0

    def _inputs(self, bid):
        sig = self.signals
        return tuple(sig[s] for s in self._sources[bid])

    def _fire(self, bid, block):
        ins = self._inputs(bid) if block.direct_feedthrough else None
        outs = block.output(self.states[bid], ins)
        for k, v in enumerate(outs):
            self.signals[(bid, k)] = v

    def step(self) -> Dict[Tuple[int, int], object]:
        """Run one cycle and return the signal table keyed by (block_id, output_index)."""
        sig = self.signals
        for kind, item, payload in self._plan:
            if kind == "block":
                try:
                    self._fire(item, payload)
                except Exception as err:
                    raise CycleAborted([item], err) from err
            else:
                self._solve_cluster(item, payload)
        for bid, block in self._stateful:
            try:
                self.states[bid] = block.update(self.states[bid], self._inputs(bid))
            except Exception as err:
                raise CycleAborted([bid], err) from err
        self.cycle += 1
        return sig

    def _solve_cluster(self, cluster: LoopCluster, plan):
        rs, order, externals, unknowns = plan
        key = cluster.member_blocks[0]
        sig = self.signals
        bindings = dict(rs.parameters)
        for sym, src in externals:
            bindings[sym] = sig[src]
        x0 = self.warm.get(key) if self.newton.initial_guess == "warm" else None
        try:
            sol = solve_loop(rs, bindings, x0)
            for slot, v in zip(unknowns, sol.values):
                sig[slot] = v
            for bid in order:
                block = self.diagram.blocks[bid]
                outs = block.output(self.states[bid], self._inputs(bid))
                for k, v in enumerate(outs):
                    if (bid, k) not in unknowns:
                        sig[(bid, k)] = v
        except (LoopSolveError, ex.ExprError) as err:
            raise CycleAborted(cluster.member_blocks, err) from err
        self.warm[key] = list(sol.values)
        self.last_iterations[key] = sol.iterations

    def run(self, cycles: int, record: Optional[Sequence[Tuple[int, int]]] = None) -> List[List[object]]:
        """Run ``cycles`` cycles, returning one row of recorded signals per cycle."""
        record = list(record) if record is not None else sorted(
            (b, k) for b in self.diagram.blocks for k in range(self.diagram.blocks[b].n_out))
        rows = []
        for _ in range(cycles):
            sig = self.step()
            rows.append([sig[s] for s in record])
        return rows

    def value(self, block, k: int = 0):
        bid = block if isinstance(block, int) else block.id
        return self.signals[(bid, k)]


def execute_cycle(executor: Executor):
    return executor.step()


# ---------------------------------------------------------------------------
# debug dump


def dump_debug(d: Diagram, schedule: Optional[ExecutionSchedule] = None) -> str:
    """Deterministic text listing of blocks, edges, schedule and loop clusters."""
    lines = ["blocks:"]
    for bid in sorted(d.blocks):
        b = d.blocks[bid]
        ft = "direct" if b.direct_feedthrough else "indirect"
        sym = " symbolic" if b.symbolic_capable else ""
        lines.append(f"  #{bid} {b.name} {b.kind} in={b.n_in} out={b.n_out} {ft}{sym}")
    lines.append("edges:")
    for e in d.sorted_edges():
        src, dst = d.blocks[e.source.block_id], d.blocks[e.sink.block_id]
        lines.append(f"  {src.name}.out{e.source.index} -> {dst.name}.in{e.sink.index} [{e.value_type}]")
    clusters = detect_algebraic_loops(d)
    lines.append("loops:")
    for c in clusters:
        unknowns = ", ".join(s for s, _ in c.unknowns)
        ext = ", ".join(s for s, _ in c.external_inputs) or "-"
        lines.append("  {" + ",".join(map(str, c.member_blocks)) + f"}} unknowns: {unknowns}; external: {ext}")
    if schedule is None:
        try:
            schedule = resolve_execution_order(d)
        except GraphError as err:
            lines.append(f"schedule: error: {err}")
            return "\n".join(lines) + "\n"
    parts = []
    for item in schedule.items:
        if isinstance(item, LoopCluster):
            parts.append("{" + ",".join(map(str, item.member_blocks)) + "}")
        else:
            parts.append(str(item))
    lines.append("schedule: " + " ".join(parts))
    return "\n".join(lines) + "\n"
