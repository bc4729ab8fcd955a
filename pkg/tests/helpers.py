"""Diagram builders and random generators shared by the test modules."""

import itertools

import numpy as np

from blockflow.graph import Diagram
from blockflow.stdblocks import (Constant, DelayN, Gain, Integrator, Product, Saturation, SimplePID, Step, Sum,
                                 Switch, UnitDelay)

SCALED_SUM_TEXT = """\
# two constants, the first one scaled, then summed
block c1 Constant value=5
block c2 Constant value=2
block g Gain gain=0.5
block s Sum signs=++
connect c1.out0 g.in0
connect g.out0 s.in0
connect c2.out0 s.in1
"""

GAIN_LOOP_TEXT = """\
block c Constant value=1
block s Sum signs=++
block g Gain gain=0.5
connect c.out0 s.in0
connect g.out0 s.in1
connect s.out0 g.in0
"""


def scaled_sum(c1=5.0, c2=2.0, gain=0.5):
    d = Diagram()
    a = d.add(Constant(c1), "c1")
    b = d.add(Constant(c2), "c2")
    g = d.add(Gain(gain), "g")
    s = d.add(Sum("++"), "s")
    d.connect(a.o(0), g.i(0))
    d.connect(g.o(0), s.i(0))
    d.connect(b.o(0), s.i(1))
    return d, s


def gain_loop(C=1.0, G=0.5):
    d = Diagram()
    c = d.add(Constant(C), "c")
    s = d.add(Sum("++"), "s")
    g = d.add(Gain(G), "g")
    d.connect(c.o(0), s.i(0))
    d.connect(g.o(0), s.i(1))
    d.connect(s.o(0), g.i(0))
    return d, s


def two_unknown_loop(c=1.0, g1=0.5, g2=0.25):
    """x1 = c + g1 x2, x2 = g2 x1 with two cross-coupled gains."""
    d = Diagram()
    cb = d.add(Constant(c), "c")
    s = d.add(Sum("++"), "s")
    a = d.add(Gain(g1), "g1")
    b = d.add(Gain(g2), "g2")
    d.connect(cb.o(0), s.i(0))
    d.connect(a.o(0), s.i(1))
    d.connect(s.o(0), b.i(0))
    d.connect(b.o(0), a.i(0))
    return d, s, a, b


# ---------------------------------------------------------------------------
# random diagrams


def _signs(rng, n):
    return "".join(rng.choice(["+", "-"]) for _ in range(n))


def _random_direct(rng):
    k = rng.integers(5)
    if k == 0:
        return Gain(float(rng.uniform(-0.9, 0.9)))
    if k == 1:
        return Sum(_signs(rng, int(rng.integers(1, 4))))
    if k == 2:
        return Product(2)
    if k == 3:
        lo = float(rng.uniform(-2, 0))
        return Saturation(lo, lo + float(rng.uniform(0.1, 3)))
    if rng.random() < 0.5:
        return SimplePID(*(float(v) for v in rng.uniform(-1, 1, 3)), T=float(rng.uniform(0.05, 1)))
    return Switch(float(rng.uniform(-1, 1)))


def _random_indirect(rng):
    k = rng.integers(5)
    if k == 0:
        return Constant(float(rng.uniform(-2, 2)))
    if k == 1:
        return UnitDelay(float(rng.uniform(-1, 1)))
    if k == 2:
        return DelayN(int(rng.integers(1, 4)), float(rng.uniform(-1, 1)))
    if k == 3:
        return Integrator(float(rng.uniform(0.01, 0.2)), float(rng.uniform(-1, 1)))
    return Step(int(rng.integers(0, 20)), float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)))


def random_dag_diagram(rng, n_blocks=None):
    """Random loop-free diagram of lowerable scalar blocks.

    Direct-feedthrough blocks only read outputs of earlier blocks or of
    indirect blocks, so there are no algebraic loops, while delays and
    integrators may still close feedback paths.
    """
    n = int(n_blocks or rng.integers(3, 13))
    d = Diagram()
    blocks = [d.add(_random_indirect(rng))]  # at least one source
    for _ in range(n - 1):
        blocks.append(d.add(_random_direct(rng) if rng.random() < 0.6 else _random_indirect(rng)))
    indirect = [b for b in blocks if not b.direct_feedthrough]
    for pos, b in enumerate(blocks):
        allowed = blocks[:pos] + [x for x in indirect if x not in blocks[:pos]] if b.direct_feedthrough else blocks
        for k in range(b.n_in):
            src = allowed[int(rng.integers(len(allowed)))]
            if src is b and b.direct_feedthrough:
                src = indirect[0]
            d.connect(src.o(int(rng.integers(src.n_out))), b.i(k))
    return d


def random_loop_diagram(rng):
    """Random diagram with one affine algebraic loop fed by bounded sources.

    The loop solves ``S = ext + G S + h S_prev`` (one unknown) or a
    two-gain cross-coupled variant, with gains chosen so the loop is well
    posed and the delayed feedback is contracting.
    """
    d = random_dag_diagram(rng, int(rng.integers(2, 7)))
    src = d.add(Constant(float(rng.uniform(-2, 2))) if rng.random() < 0.5 else
                Step(int(rng.integers(0, 30)), float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))))
    s = d.add(Sum("+++"))
    prev = d.add(UnitDelay(0.0))
    h = d.add(Gain(float(rng.uniform(-0.3, 0.3))))
    d.connect(src.o(0), s.i(0))
    d.connect(prev.o(0), h.i(0))
    d.connect(h.o(0), s.i(2))
    d.connect(s.o(0), prev.i(0))
    if rng.random() < 0.5:
        g = d.add(Gain(float(rng.uniform(-0.8, 0.5))))
        d.connect(s.o(0), g.i(0))
        d.connect(g.o(0), s.i(1))
    else:
        g1 = d.add(Gain(float(rng.uniform(-0.7, 0.7))))
        g2 = d.add(Gain(float(rng.uniform(-0.7, 0.7))))
        d.connect(s.o(0), g1.i(0))
        d.connect(g1.o(0), g2.i(0))
        d.connect(g2.o(0), s.i(1))
    # a consumer of the loop output
    tail = d.add(Gain(float(rng.uniform(-1, 1))))
    d.connect(s.o(0), tail.i(0))
    return d


def random_graph_diagram(rng, n_blocks):
    """Arbitrary wiring of gains, sums, delays and constants; loops anywhere."""
    d = Diagram()
    blocks = []
    for _ in range(n_blocks):
        k = rng.integers(4)
        if k == 0:
            b = Gain(float(rng.uniform(-0.5, 0.5)))
        elif k == 1:
            b = Sum(_signs(rng, int(rng.integers(1, 4))))
        elif k == 2:
            b = UnitDelay()
        else:
            b = Constant(1.0)
        blocks.append(d.add(b))
    for b in blocks:
        for k in range(b.n_in):
            src = blocks[int(rng.integers(len(blocks)))]
            while src.n_out == 0:
                src = blocks[int(rng.integers(len(blocks)))]
            d.connect(src.o(0), b.i(k))
    return d


def brute_force_loops(d):
    """Algebraic loops by transitive closure over the direct-feedthrough subgraph."""
    direct = sorted(b for b, blk in d.blocks.items() if blk.direct_feedthrough)
    idx = {b: i for i, b in enumerate(direct)}
    n = len(direct)
    reach = np.zeros((n, n), dtype=bool)
    for e in d.edges.values():
        u, v = e.source.block_id, e.sink.block_id
        if u in idx and v in idx:
            reach[idx[u], idx[v]] = True
    for k, i, j in itertools.product(range(n), repeat=3):
        # k outermost: Warshall
        if reach[i, k] and reach[k, j]:
            reach[i, j] = True
    comps, seen = [], set()
    for i in range(n):
        if i in seen:
            continue
        comp = [j for j in range(n) if j == i or (reach[i, j] and reach[j, i])]
        seen.update(comp)
        if len(comp) > 1 or reach[i, i]:
            comps.append(tuple(sorted(direct[j] for j in comp)))
    return sorted(comps)


# ---------------------------------------------------------------------------
# control


def random_stable(rng, n):
    """Random continuous-time A with every eigenvalue real part <= -0.5."""
    a = rng.normal(size=(n, n))
    shift = np.linalg.eigvals(a).real.max() + rng.uniform(0.5, 2.0)
    return a - shift * np.eye(n)


def random_stabilizable(rng, n):
    """Random (A, B, Q, R) with (A, B) controllable and Q, R positive definite.

    A is scaled to a spectral radius in [0.3, 1.5], so about half the plants
    are open-loop unstable while P stays moderate. Strongly unstable plants
    give |P| in the thousands, and then no solver reaches an absolute DARE
    residual of 1e-9 in double precision.
    """
    m = int(rng.integers(1, n + 1))
    while True:
        A = rng.normal(size=(n, n))
        A *= rng.uniform(0.3, 1.5) / max(np.abs(np.linalg.eigvals(A)).max(), 1e-3)
        B = rng.normal(size=(n, m))
        B *= rng.uniform(0.5, 2.0, m) / np.linalg.norm(B, axis=0)
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n)])
        if np.linalg.matrix_rank(ctrb) == n and np.linalg.cond(ctrb) < 1e3:
            break
    q = rng.normal(size=(n, n))
    r = rng.normal(size=(m, m))
    return A, B, q @ q.T + 0.1 * np.eye(n), r @ r.T + 0.5 * np.eye(m)


def horizon_gap(A, T, horizon=1.0):
    """Gap between ZOH and Tustin state transitions over a fixed time horizon.

    One-step matrices differ by O(T^3); over ``horizon / T`` steps the
    accumulated difference is O(T^2).
    """
    from blockflow.control import StateSpace, c2d_tustin, c2d_zoh

    n = A.shape[0]
    sys = StateSpace(A, np.zeros((n, 1)), np.zeros((1, n)))
    steps = int(round(horizon / T))
    az = np.linalg.matrix_power(c2d_zoh(sys, T).A, steps)
    at = np.linalg.matrix_power(c2d_tustin(sys, T).A, steps)
    return float(np.abs(az - at).max())


# ---------------------------------------------------------------------------
# net


def fuzz_registry():
    from blockflow.net import TypeRegistry

    reg = TypeRegistry()
    reg.vector(2, 3)
    reg.matrix(3, 2, 2)
    return reg


def random_payload(rng, pt):
    if pt.shape is None:
        return None
    if pt.shape == ():
        return float(rng.normal())
    return rng.normal(size=pt.shape)


def fuzz_decoder(rng, n, signer, types):
    """Feed ``n`` random or mutated byte strings to the decoder; returns how many were accepted.

    Half the inputs are uniformly random bytes. The rest are valid frames
    that were truncated, extended or had bytes changed, so every check past
    the magic gets exercised.
    """
    from blockflow.net import FrameError, decode_frame, encode_frame

    valid = [encode_frame(int(rng.integers(1 << 32)), 7, pt.type_id, random_payload(rng, pt), signer, types)
             for pt in types for _ in range(5)]
    accepted = 0
    for k in range(n):
        if k % 2 == 0:
            data = rng.bytes(int(rng.integers(0, 120)))
        else:
            base = valid[int(rng.integers(len(valid)))]
            how = int(rng.integers(3))
            if how == 0:
                data = base[:int(rng.integers(len(base)))]
            elif how == 1:
                data = base + rng.bytes(int(rng.integers(1, 16)))
            else:
                buf = bytearray(base)
                for _ in range(int(rng.integers(1, 4))):
                    buf[int(rng.integers(len(buf)))] ^= int(rng.integers(1, 256))
                data = bytes(buf)
            if data == base:
                continue
        try:
            decode_frame(data, signer, types)
        except FrameError:
            continue
        accepted += 1
    return accepted
