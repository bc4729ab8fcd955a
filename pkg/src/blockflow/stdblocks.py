"""Standard block library.

Every kind here registers itself, so diagram files can refer to it by its
``kind`` name with the constructor keywords as parameters, e.g.
``block g Gain gain=0.5``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import expr as ex
from .graph import (IMAGE, SCALAR, Block, Diagram, SlotRef, ValueType, matrix, register_block,
                    vector)


def _vtype(value_type) -> ValueType:
    if value_type is None:
        return SCALAR
    if isinstance(value_type, ValueType):
        return value_type
    return ValueType.parse(str(value_type))


def _copy(v):
    return v.copy() if isinstance(v, np.ndarray) else v


def _zero_of(t: ValueType, initial=0.0):
    if t.kind == "scalar":
        return float(initial)
    if t.kind == "image":
        return np.array(initial, dtype=float)
    return np.full(t.shape, float(initial)) if np.ndim(initial) == 0 else np.array(initial, dtype=float)


# ---------------------------------------------------------------------------
# plain per-cycle functions


def gain_eval(u, k):
    if np.ndim(k) == 2:
        return np.asarray(k, dtype=float) @ np.asarray(u, dtype=float)
    return k * u


def sum_eval(inputs: Sequence, signs: Sequence[int]):
    acc = inputs[0] if signs[0] > 0 else -inputs[0]
    for u, s in zip(inputs[1:], signs[1:]):
        acc = acc + u if s > 0 else acc - u
    return acc


def saturation_eval(u: float, lo: float, hi: float) -> float:
    if u > hi:
        return hi
    if u < lo:
        return lo
    return u


@dataclass
class PIDState:
    integral: float = 0.0
    prev_error: float = 0.0


def pid_step(e: float, kp: float, ki: float, kd: float, T: float, state: PIDState):
    """One discrete PID update. Returns ``(u, new_state)``.

    The integral is advanced before it is used, the derivative is the plain
    backward difference of the error.
    """
    integral = state.integral + T * e
    u = kp * e + ki * integral + kd * (e - state.prev_error) / T
    return u, PIDState(integral, e)


def unit_delay_step(u, state):
    """Returns ``(output, new_state)``: the output is the previous input."""
    return state, u


def integrator_step(u: float, T: float, state: float):
    """Forward Euler accumulator. Returns ``(output, new_state)``."""
    return state, state + T * u


# ---------------------------------------------------------------------------
# sources and static blocks


@register_block
class Constant(Block):
    kind = "Constant"
    direct_feedthrough = False
    lowerable = True

    def __init__(self, value=0.0):
        self.value = float(value) if np.ndim(value) == 0 else np.array(value, dtype=float)
        super().__init__([], [ValueType.of(self.value)], {"value": value})

    def output(self, state, inputs):
        return (_copy(self.value),)

    def lower(self, em, ins, state):
        return [em.load_const(self.value)]


@register_block
class Gain(Block):
    """``y = K u``; a 2-D ``K`` maps vector(m) to vector(n)."""

    kind = "Gain"
    direct_feedthrough = True
    lowerable = True

    def __init__(self, gain=1.0, type=None):
        if np.ndim(gain) == 2:
            self.gain = np.array(gain, dtype=float)
            n, m = self.gain.shape
            tin, tout = vector(m), vector(n)
        else:
            self.gain = float(gain)
            tin = tout = _vtype(type)
        params = {"gain": gain}
        if type is not None:
            params["type"] = str(type)
        super().__init__([tin], [tout], params)
        self.symbolic_capable = np.ndim(gain) == 0 and tin == SCALAR

    def output(self, state, inputs):
        return (gain_eval(inputs[0], self.gain),)

    def symbolic(self, inputs, params):
        return (ex.Mul((params["gain"], inputs[0])),)

    def symbolic_parameters(self):
        return {"gain": self.gain}

    def check(self):
        if np.ndim(self.gain) not in (0, 2):
            return ["gain must be a scalar or a matrix"]
        return []

    def lower(self, em, ins, state):
        return [em.mul(em.param(self.gain), ins[0])]


@register_block
class Sum(Block):
    """Signed sum. ``signs`` is a string like ``"+-"`` or a list of ±1."""

    kind = "Sum"
    direct_feedthrough = True
    lowerable = True

    def __init__(self, signs="++", type=None):
        if isinstance(signs, str):
            parsed = [1 if c == "+" else -1 if c == "-" else None for c in signs]
            if None in parsed:
                raise ValueError(f"bad sign string {signs!r}")
        elif isinstance(signs, (int, np.integer)):
            parsed = [1] * int(signs)
        else:
            parsed = [1 if s > 0 else -1 for s in signs]
        if not parsed:
            raise ValueError("Sum needs at least one input")
        self.signs = tuple(parsed)
        t = _vtype(type)
        params = {"signs": "".join("+" if s > 0 else "-" for s in self.signs)}
        if type is not None:
            params["type"] = str(type)
        super().__init__([t] * len(self.signs), [t], params)
        self.symbolic_capable = t == SCALAR

    def output(self, state, inputs):
        return (sum_eval(inputs, self.signs),)

    def symbolic(self, inputs, params):
        terms = [u if s > 0 else ex.Neg(u) for u, s in zip(inputs, self.signs)]
        return (terms[0] if len(terms) == 1 else ex.Add(tuple(terms)),)

    def lower(self, em, ins, state):
        acc = ins[0] if self.signs[0] > 0 else em.neg(ins[0])
        for u, s in zip(ins[1:], self.signs[1:]):
            acc = em.add(acc, u if s > 0 else em.neg(u))
        return [acc]


@register_block
class Product(Block):
    kind = "Product"
    direct_feedthrough = True
    symbolic_capable = True
    lowerable = True

    def __init__(self, n=2):
        n = int(n)
        if n < 2:
            raise ValueError("Product needs at least two inputs")
        super().__init__([SCALAR] * n, [SCALAR], {"n": n})

    def output(self, state, inputs):
        acc = inputs[0]
        for u in inputs[1:]:
            acc = acc * u
        return (acc,)

    def symbolic(self, inputs, params):
        return (ex.Mul(tuple(inputs)),)

    def lower(self, em, ins, state):
        acc = ins[0]
        for u in ins[1:]:
            acc = em.mul(acc, u)
        return [acc]


@register_block
class Saturation(Block):
    """Clamp to ``[lo, hi]``. Not symbolic: it cannot sit inside a solved loop."""

    kind = "Saturation"
    direct_feedthrough = True
    lowerable = True

    def __init__(self, lo=-1.0, hi=1.0):
        self.lo, self.hi = float(lo), float(hi)
        super().__init__([SCALAR], [SCALAR], {"lo": lo, "hi": hi})

    def output(self, state, inputs):
        return (saturation_eval(inputs[0], self.lo, self.hi),)

    def check(self):
        return [] if self.lo <= self.hi else [f"lo={self.lo} exceeds hi={self.hi}"]

    def lower(self, em, ins, state):
        return [em.clamp(ins[0], em.param(self.lo), em.param(self.hi))]


@register_block
class Switch(Block):
    """Outputs input 0 when input 1 exceeds ``threshold``, else input 2."""

    kind = "Switch"
    direct_feedthrough = True
    lowerable = True

    def __init__(self, threshold=0.0):
        self.threshold = float(threshold)
        super().__init__([SCALAR] * 3, [SCALAR], {"threshold": threshold})

    def output(self, state, inputs):
        a, ctrl, b = inputs
        return (a if ctrl > self.threshold else b,)

    def lower(self, em, ins, state):
        return [em.select(ins[1], em.param(self.threshold), ins[0], ins[2])]


# ---------------------------------------------------------------------------
# stateful blocks


@register_block
class UnitDelay(Block):
    kind = "UnitDelay"
    direct_feedthrough = False
    stateful = True
    lowerable = True

    def __init__(self, initial=0.0, type=None):
        t = _vtype(type) if type is not None else ValueType.of(initial)
        self.initial = _zero_of(t, initial)
        params = {"initial": initial}
        if type is not None:
            params["type"] = str(type)
        super().__init__([t], [t], params, state_size=1)

    def init_state(self, seed=None):
        return _copy(self.initial)

    def output(self, state, inputs):
        return (_copy(state),)

    def update(self, state, inputs):
        return _copy(inputs[0])

    def lower(self, em, ins, state):
        return [em.load_state(state[0])]

    def lower_init(self):
        return [float(self.initial)]

    def lower_update(self, em, ins, state):
        em.store_state(state[0], ins[0])


@register_block
class DelayN(Block):
    """Output equals the input from ``n`` cycles ago; ``initial`` until then."""

    kind = "DelayN"
    direct_feedthrough = False
    stateful = True
    lowerable = True

    def __init__(self, n=1, initial=0.0):
        self.n = int(n)
        if self.n < 1:
            raise ValueError("DelayN needs n >= 1")
        self.initial = float(initial)
        super().__init__([SCALAR], [SCALAR], {"n": self.n, "initial": initial}, state_size=self.n)

    def init_state(self, seed=None):
        return [[self.initial] * self.n, 0]

    def output(self, state, inputs):
        buf, idx = state
        return (buf[idx],)

    def update(self, state, inputs):
        buf, idx = state
        buf[idx] = inputs[0]
        state[1] = (idx + 1) % self.n
        return state

    # lowered as a shift register: slot 0 holds the oldest sample
    def lower(self, em, ins, state):
        return [em.load_state(state[0])]

    def lower_init(self):
        return [self.initial] * self.n

    def lower_update(self, em, ins, state):
        vals = [em.load_state(s) for s in state[1:]]
        for s, v in zip(state[:-1], vals):
            em.store_state(s, v)
        em.store_state(state[-1], ins[0])


@register_block
class Integrator(Block):
    kind = "Integrator"
    direct_feedthrough = False
    stateful = True
    lowerable = True

    def __init__(self, T=1.0, initial=0.0):
        self.T, self.initial = float(T), float(initial)
        super().__init__([SCALAR], [SCALAR], {"T": T, "initial": initial}, state_size=1)

    def init_state(self, seed=None):
        return self.initial

    def output(self, state, inputs):
        return (state,)

    def update(self, state, inputs):
        return integrator_step(inputs[0], self.T, state)[1]

    def check(self):
        return [] if self.T > 0 else ["sample time T must be positive"]

    def lower(self, em, ins, state):
        return [em.load_state(state[0])]

    def lower_init(self):
        return [self.initial]

    def lower_update(self, em, ins, state):
        x = em.load_state(state[0])
        em.store_state(state[0], em.add(x, em.mul(em.param(self.T), ins[0])))


@register_block
class SimplePID(Block):
    """Single-block PID on an error input (see :func:`pid_step`)."""

    kind = "SimplePID"
    direct_feedthrough = True
    stateful = True
    lowerable = True

    def __init__(self, kp=1.0, ki=0.0, kd=0.0, T=1.0):
        self.kp, self.ki, self.kd, self.T = float(kp), float(ki), float(kd), float(T)
        super().__init__([SCALAR], [SCALAR], {"kp": kp, "ki": ki, "kd": kd, "T": T}, state_size=2)

    def init_state(self, seed=None):
        return PIDState()

    def output(self, state, inputs):
        return (pid_step(inputs[0], self.kp, self.ki, self.kd, self.T, state)[0],)

    def update(self, state, inputs):
        return pid_step(inputs[0], self.kp, self.ki, self.kd, self.T, state)[1]

    def check(self):
        return [] if self.T > 0 else ["sample time T must be positive"]

    def _lower_integral(self, em, e, state):
        return em.add(em.load_state(state[0]), em.mul(em.param(self.T), e))

    def lower(self, em, ins, state):
        e = ins[0]
        integral = self._lower_integral(em, e, state)
        p = em.mul(em.param(self.kp), e)
        i = em.mul(em.param(self.ki), integral)
        diff = em.add(e, em.neg(em.load_state(state[1])))
        d = em.div(em.mul(em.param(self.kd), diff), em.param(self.T))
        return [em.add(em.add(p, i), d)]

    def lower_init(self):
        return [0.0, 0.0]

    def lower_update(self, em, ins, state):
        em.store_state(state[0], self._lower_integral(em, ins[0], state))
        em.store_state(state[1], ins[0])


@register_block
class Step(Block):
    """Source that outputs ``initial`` before cycle ``at`` and ``final`` from then on."""

    kind = "Step"
    direct_feedthrough = False
    stateful = True
    lowerable = True

    def __init__(self, at=0, initial=0.0, final=1.0):
        self.at = int(at)
        self.initial = float(initial)
        self.final = float(final)
        super().__init__([], [SCALAR], {"at": at, "initial": initial, "final": final}, state_size=1)

    def init_state(self, seed=None):
        return 0.0

    def output(self, state, inputs):
        return (self.final if state > self.at - 0.5 else self.initial,)

    def update(self, state, inputs):
        return state + 1.0

    def lower(self, em, ins, state):
        k = em.load_state(state[0])
        return [em.select(k, em.param(self.at - 0.5), em.param(self.final), em.param(self.initial))]

    def lower_init(self):
        return [0.0]

    def lower_update(self, em, ins, state):
        em.store_state(state[0], em.add(em.load_state(state[0]), em.param(1.0)))


@register_block
class UniformNoise(Block):
    """Uniform noise in ``[-amplitude, amplitude]`` from a seeded generator."""

    kind = "UniformNoise"
    direct_feedthrough = False
    stateful = True

    def __init__(self, amplitude=1.0, seed=None):
        self.amplitude = float(amplitude)
        self.seed = seed
        params = {"amplitude": amplitude}
        if seed is not None:
            params["seed"] = seed
        super().__init__([], [SCALAR], params)

    def init_state(self, seed=None):
        rng = np.random.default_rng(self.seed if self.seed is not None else seed)
        return [rng, self.amplitude * rng.uniform(-1.0, 1.0)]

    def output(self, state, inputs):
        return (state[1],)

    def update(self, state, inputs):
        state[1] = self.amplitude * state[0].uniform(-1.0, 1.0)
        return state


@register_block
class DiscreteStateSpace(Block):
    """Discrete LTI system ``x+ = A x + B u``, ``y = C x + D u``.

    Direct feedthrough only when ``D`` is nonzero. Scalar ports are used
    when the system has a single input or output.
    """

    kind = "DiscreteStateSpace"
    direct_feedthrough = False
    stateful = True

    def __new__(cls, A=None, B=None, C=None, D=None, x0=None):
        D_arr = np.atleast_2d(np.array(D if D is not None else 0.0, dtype=float))
        if np.any(D_arr != 0.0):
            cls = _DirectStateSpace
        return super().__new__(cls)

    def __init__(self, A=None, B=None, C=None, D=None, x0=None):
        self.A = np.atleast_2d(np.array(A, dtype=float))
        n = self.A.shape[0]
        self.B = np.array(B, dtype=float).reshape(n, -1)
        m = self.B.shape[1]
        self.C = np.array(C, dtype=float).reshape(-1, n)
        p = self.C.shape[0]
        self.D = np.zeros((p, m)) if D is None else np.array(D, dtype=float).reshape(p, m)
        self.x0 = np.zeros(n) if x0 is None else np.array(x0, dtype=float).reshape(n)
        tin = SCALAR if m == 1 else vector(m)
        tout = SCALAR if p == 1 else vector(p)
        params = {"A": _listify(A), "B": _listify(B), "C": _listify(C)}
        if D is not None:
            params["D"] = _listify(D)
        if x0 is not None:
            params["x0"] = _listify(x0)
        super().__init__([tin], [tout], params, state_size=n)

    def _u(self, u):
        return np.atleast_1d(np.asarray(u, dtype=float))

    def _y(self, y):
        return float(y[0]) if self.output_types[0] == SCALAR else y

    def init_state(self, seed=None):
        return self.x0.copy()

    def output(self, state, inputs):
        y = self.C @ state
        if inputs is not None:
            y = y + self.D @ self._u(inputs[0])
        return (self._y(y),)

    def update(self, state, inputs):
        return self.A @ state + self.B @ self._u(inputs[0])


class _DirectStateSpace(DiscreteStateSpace):
    direct_feedthrough = True


def _listify(v):
    return np.asarray(v, dtype=float).tolist() if v is not None else None


# ---------------------------------------------------------------------------
# user functions and images


class FunctionBlock(Block):
    """Wraps a Python callable. Never symbolic and never lowerable to code."""

    kind = "Function"
    direct_feedthrough = True

    def __init__(self, fn: Callable, n_in: int = 1, n_out: int = 1, direct: bool = True,
                 input_types: Optional[Sequence[ValueType]] = None,
                 output_types: Optional[Sequence[ValueType]] = None):
        self.fn = fn
        super().__init__(list(input_types or [SCALAR] * n_in), list(output_types or [SCALAR] * n_out),
                         {"fn": fn, "n_in": n_in, "n_out": n_out, "direct": direct,
                          "input_types": input_types, "output_types": output_types})
        self.direct_feedthrough = bool(direct)

    def output(self, state, inputs):
        outs = self.fn(*inputs) if inputs is not None else self.fn()
        if self.n_out == 1:
            return (outs,)
        return tuple(outs)


register_block(FunctionBlock)


@register_block
class Conv2D(Block):
    kind = "Conv2D"
    direct_feedthrough = True

    def __init__(self, kernel=None):
        from .imaging import noise_robust_laplacian_kernel
        self.kernel = noise_robust_laplacian_kernel() if kernel is None else np.array(kernel, dtype=float)
        super().__init__([IMAGE], [IMAGE], {"kernel": None if kernel is None else _listify(kernel)})

    def output(self, state, inputs):
        from .imaging import conv2d
        return (conv2d(inputs[0], self.kernel),)

    def check(self):
        h, w = self.kernel.shape
        return [] if h % 2 == 1 and w % 2 == 1 else ["kernel dimensions must be odd"]


@register_block
class Sharpness(Block):
    kind = "Sharpness"
    direct_feedthrough = True

    def __init__(self):
        super().__init__([IMAGE], [SCALAR], {})

    def output(self, state, inputs):
        from .imaging import sharpness
        return (sharpness(inputs[0]),)


# ---------------------------------------------------------------------------
# anti-windup PID composite


class AntiWindup(str, enum.Enum):
    NONE = "none"
    CLAMPING = "clamping"
    BACK_CALCULATION = "back_calculation"


@dataclass
class PIDFragment:
    """Handles into a PID sub-diagram: drive ``input`` with the error, read ``output``."""

    input: SlotRef
    output: SlotRef
    unsaturated: SlotRef
    integral: SlotRef
    blocks: List[Block]


def build_anti_windup_pid(d: Diagram, kp: float, ki: float, kd: float, T: float,
                          u_min: float, u_max: float, strategy: AntiWindup = AntiWindup.CLAMPING,
                          tracking_gain: Optional[float] = None, prefix: str = "pid") -> PIDFragment:
    """Compose a saturated PID from delays, sums, gains and a saturation block.

    With ``CLAMPING`` the integral is frozen whenever the output saturates
    and the error pushes further into the limit (conditional integration).
    ``BACK_CALCULATION`` bleeds the integral by ``tracking_gain`` times the
    saturation excess. ``NONE`` gives the plain PID followed by a saturation.
    """
    if not u_min < u_max:
        raise ValueError("u_min must be below u_max")
    strategy = AntiWindup(strategy)
    blocks = []

    def add(block, name):
        blocks.append(d.add(block, f"{prefix}_{name}"))
        return blocks[-1]

    err = add(Gain(1.0), "err")
    p = add(Gain(kp), "p")
    e_prev = add(UnitDelay(), "eprev")
    de = add(Sum("+-"), "de")
    dgain = add(Gain(kd / T), "d")
    te = add(Gain(T), "te")
    i_prev = add(UnitDelay(), "iprev")
    i_cand = add(Sum("++"), "icand")
    igain = add(Gain(ki), "i")
    u_raw = add(Sum("+++"), "u")
    sat = add(Saturation(u_min, u_max), "sat")

    d.connect(err.o(0), p.i(0))
    d.connect(err.o(0), e_prev.i(0))
    d.connect(err.o(0), de.i(0))
    d.connect(e_prev.o(0), de.i(1))
    d.connect(de.o(0), dgain.i(0))
    d.connect(err.o(0), te.i(0))
    d.connect(i_prev.o(0), i_cand.i(0))
    d.connect(te.o(0), i_cand.i(1))
    d.connect(i_cand.o(0), igain.i(0))
    d.connect(p.o(0), u_raw.i(0))
    d.connect(igain.o(0), u_raw.i(1))
    d.connect(dgain.o(0), u_raw.i(2))
    d.connect(u_raw.o(0), sat.i(0))

    if strategy is AntiWindup.NONE:
        integral = i_cand
        d.connect(i_cand.o(0), i_prev.i(0))
    elif strategy is AntiWindup.CLAMPING:
        # freeze when e * (u_raw - u_sat) > 0, i.e. saturated and pushing outward
        excess = add(Sum("+-"), "excess")
        push = add(Product(2), "push")
        gate = add(Switch(0.0), "gate")
        d.connect(u_raw.o(0), excess.i(0))
        d.connect(sat.o(0), excess.i(1))
        d.connect(err.o(0), push.i(0))
        d.connect(excess.o(0), push.i(1))
        d.connect(i_prev.o(0), gate.i(0))
        d.connect(push.o(0), gate.i(1))
        d.connect(i_cand.o(0), gate.i(2))
        d.connect(gate.o(0), i_prev.i(0))
        integral = gate
    else:
        kt = tracking_gain if tracking_gain is not None else (1.0 / ki if ki else 1.0)
        excess = add(Sum("-+"), "excess")
        track = add(Gain(kt * T), "track")
        i_new = add(Sum("++"), "inew")
        d.connect(u_raw.o(0), excess.i(0))
        d.connect(sat.o(0), excess.i(1))
        d.connect(excess.o(0), track.i(0))
        d.connect(i_cand.o(0), i_new.i(0))
        d.connect(track.o(0), i_new.i(1))
        d.connect(i_new.o(0), i_prev.i(0))
        integral = i_new
    return PIDFragment(err.i(0), sat.o(0), u_raw.o(0), integral.o(0), blocks)


# ---------------------------------------------------------------------------
# joint servo scenario: a double integrator driven through a torque limit


@dataclass
class JointServo:
    diagram: Diagram
    reference: Block
    position: Block
    torque: SlotRef
    pid: PIDFragment


def build_joint_servo(strategy: AntiWindup = AntiWindup.CLAMPING, kp: float = 12.0, ki: float = 8.0,
                      kd: float = 6.0, T: float = 0.01, u_max: float = 1.0, target: float = 1.0,
                      disturbance: float = -0.5, disturbance_at: int = 800,
                      release_at: int = 1400) -> JointServo:
    """Unit-inertia joint ``q'' = u + d`` under saturated PID position control.

    The reference steps to ``target`` at cycle 0; a load torque
    ``disturbance`` acts between ``disturbance_at`` and ``release_at``.
    The default gains place all closed-loop poles at ``s = -2``.
    """
    from .control import StateSpace, c2d_zoh

    plant = c2d_zoh(StateSpace([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], [[1.0, 0.0]]), T)
    d = Diagram()
    ref = d.add(Step(0, 0.0, target), "reference")
    err = d.add(Sum("+-"), "error")
    pid = build_anti_windup_pid(d, kp, ki, kd, T, -u_max, u_max, strategy)
    load_on = d.add(Step(disturbance_at, 0.0, disturbance), "load_on")
    load_off = d.add(Step(release_at, 0.0, -disturbance), "load_off")
    torque = d.add(Sum("+++"), "torque")
    joint = d.add(DiscreteStateSpace(plant.A, plant.B, plant.C), "joint")
    d.connect(ref.o(0), err.i(0))
    d.connect(joint.o(0), err.i(1))
    d.connect(err.o(0), pid.input)
    d.connect(pid.output, torque.i(0))
    d.connect(load_on.o(0), torque.i(1))
    d.connect(load_off.o(0), torque.i(2))
    d.connect(torque.o(0), joint.i(0))
    return JointServo(d, ref, joint, pid.output, pid)


def simulate_joint_servo(strategy: AntiWindup = AntiWindup.CLAMPING, cycles: int = 2000, **kwargs) -> np.ndarray:
    """Rows of (cycle, reference, position, actuator torque)."""
    from .graph import Executor

    servo = build_joint_servo(strategy, **kwargs)
    ex = Executor(servo.diagram)
    rows = np.empty((cycles, 4))
    u_slot = (servo.torque.block_id, servo.torque.index)
    for k in range(cycles):
        sig = ex.step()
        rows[k] = (k, sig[(servo.reference.id, 0)], sig[(servo.position.id, 0)], sig[u_slot])
    return rows


def peak_overshoot(rows: np.ndarray) -> float:
    """Largest excursion of the position above the final reference value."""
    return float(np.max(rows[:, 2]) - rows[-1, 1])
