"""Sharpness-seeking autofocus controller and a synthetic lens/motor plant.

Each cycle the controller measures the sharpness of the current frame and
compares it with the value from ``buffer_len`` cycles earlier. The change
``e`` drives a velocity-form PID whose output is added to the focus
setpoint, in a persistent search direction. When the change goes clearly
negative while the setpoint has actually been moving, we have walked past
the sharpness peak: the direction flips, the setpoint jumps back by half
of the distance travelled over the buffer window (the peak sits near the
middle of that window), and the step gain is reduced so the search
settles. The setpoint is clamped to ``[0, setpoint_max]``.

The plant blurs a fixed high-contrast scene with a Gaussian whose width
grows with the distance between motor position and true focus, adds
uniform noise, and moves the motor as a first-order lag.

Everything exists twice: as plain functions (:func:`autofocus_step`,
:func:`simulate`) and as a block diagram (:func:`build_autofocus_diagram`)
built from the standard blocks; the two produce the same trace.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import imaging
from .graph import IMAGE, SCALAR, Block, Diagram, Executor, register_block
from .stdblocks import (Conv2D, DelayN, FunctionBlock, PIDState, Product, Saturation, Sharpness,
                        SimplePID, Sum, UnitDelay, pid_step, saturation_eval, sum_eval)

FRAME_PERIOD = 1.0 / 27.0
TRACE_COLUMNS = ("cycle", "sharpness", "error", "setpoint", "motor_position", "true_focus")


@dataclass(frozen=True)
class AutofocusConfig:
    """Controller tuning. All defaults live here."""

    kp: float = 0.0045
    ki: float = 0.0
    kd: float = 0.0
    buffer_len: int = 100
    reversal_threshold: float = 0.02  # fraction of current sharpness
    reversal_debounce: int = 5        # consecutive cycles below -threshold
    refractory: int = 100             # cycles between flips
    min_travel: float = 0.01          # setpoint travel over the window needed to flip
    jump_fraction: float = 0.5
    gain_decay: float = 0.3
    deadband: float = 0.01            # fraction of current sharpness
    setpoint_min: float = 0.0
    setpoint_max: float = 0.6

    def __post_init__(self):
        if self.buffer_len < 1 or self.reversal_debounce < 1 or self.refractory < 0:
            raise ValueError("buffer_len and reversal_debounce must be >= 1, refractory >= 0")
        if not 0.0 < self.gain_decay <= 1.0:
            raise ValueError("gain_decay must be in (0, 1]")
        if not self.setpoint_min < self.setpoint_max:
            raise ValueError("empty setpoint range")


@dataclass(frozen=True)
class PlantConfig:
    true_focus: float = 0.45
    sigma0: float = 0.6
    slope: float = 6.0
    motor_tau: float = 0.12
    noise: float = 0.05
    scene_size: int = 48
    blur_radius: int = 9
    initial_motor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.motor_tau < 0 or self.noise < 0:
            raise ValueError("motor_tau and noise must be non-negative")
        if self.scene_size < 2 * self.blur_radius + 1 or self.scene_size < 7:
            raise ValueError("scene too small for the blur and Laplacian kernels")


# ---------------------------------------------------------------------------
# plant


def make_scene(n: int = 48) -> np.ndarray:
    """Two bright blocks and a thin bar on a dark background, contrast 1."""
    img = np.zeros((n, n))
    a = n / 48.0
    img[int(8 * a):int(20 * a), int(8 * a):int(20 * a)] = 1.0
    img[int(28 * a):int(40 * a), int(14 * a):int(34 * a)] = 1.0
    img[int(12 * a):int(36 * a), int(30 * a):int(30 * a) + 3] = 1.0
    return img


@dataclass
class FocusPlant:
    config: PlantConfig
    motor: float
    scene: np.ndarray
    rng: np.random.Generator

    @classmethod
    def create(cls, config: PlantConfig = PlantConfig()) -> "FocusPlant":
        return cls(config, float(config.initial_motor), make_scene(config.scene_size),
                   np.random.default_rng(config.seed))

    def sigma(self, motor: Optional[float] = None) -> float:
        c = self.config
        m = self.motor if motor is None else motor
        return c.sigma0 + c.slope * abs(m - c.true_focus)


def render_scene(plant: FocusPlant) -> np.ndarray:
    """Blurred scene at the current motor position plus uniform noise (advances the plant rng)."""
    c = plant.config
    img = imaging.gaussian_blur(plant.scene, plant.sigma(), c.blur_radius)
    if c.noise > 0:
        img = img + plant.rng.uniform(-c.noise, c.noise, img.shape)
    return img


def motor_step(plant: FocusPlant, setpoint: float, T: float = FRAME_PERIOD) -> FocusPlant:
    if not T > 0:
        raise ValueError("T must be positive")
    tau = plant.config.motor_tau
    if T >= tau:
        motor = float(setpoint)
    else:
        motor = plant.motor + (T / tau) * (setpoint - plant.motor)
    return dataclasses.replace(plant, motor=motor)


def frame_sharpness(img) -> float:
    return imaging.sharpness(imaging.noise_robust_laplacian(img))


def sharpness_sweep(config: PlantConfig, motors: Sequence[float]) -> np.ndarray:
    """Sharpness of the noiseless render at each motor position."""
    plant = FocusPlant.create(dataclasses.replace(config, noise=0.0))
    out = []
    for m in motors:
        plant.motor = float(m)
        out.append(frame_sharpness(render_scene(plant)))
    return np.array(out)


# ---------------------------------------------------------------------------
# controller


class SharpnessBuffer:
    """Fixed-capacity ring buffer; :meth:`ago` is 0 until it has filled once."""

    def __init__(self, capacity: int = 100):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.data = [0.0] * capacity
        self.count = 0

    def ago(self) -> float:
        """The value pushed ``capacity`` pushes before the next one."""
        if self.count < self.capacity:
            return 0.0
        return self.data[self.count % self.capacity]

    def push(self, value: float) -> None:
        self.data[self.count % self.capacity] = float(value)
        self.count += 1

    def copy(self) -> "SharpnessBuffer":
        b = SharpnessBuffer(self.capacity)
        b.data = list(self.data)
        b.count = self.count
        return b


@dataclass(frozen=True)
class DirectionState:
    direction: float = 1.0
    scale: float = 1.0         # step gain multiplier, reduced at every flip
    below: int = 0             # consecutive cycles with e below -threshold
    since_flip: int = 1 << 30


def direction_update(e: float, s: float, p: float, p_old: float, st: DirectionState,
                     cfg: AutofocusConfig) -> Tuple[float, float, DirectionState]:
    """Returns ``(signed step gain, setpoint offset, new state)``."""
    below = st.below + 1 if e < -cfg.reversal_threshold * s else 0
    since = st.since_flip + 1
    travel = p - p_old
    if below >= cfg.reversal_debounce and since > cfg.refractory and abs(travel) > cfg.min_travel:
        d = -st.direction
        scale = st.scale * cfg.gain_decay
        nst = DirectionState(d, scale, below, 0)
        return d * scale, -cfg.jump_fraction * travel, nst
    nst = DirectionState(st.direction, st.scale, below, since)
    return st.direction * st.scale, 0.0, nst


def normalized_change(e: float, s: float, deadband: float) -> float:
    """``|e| / s`` with a deadband of ``deadband * s``; 0 when ``s`` is 0."""
    if s <= 0.0 or abs(e) <= deadband * s:
        return 0.0
    return abs(e) / s


@dataclass
class AutofocusState:
    buffer: SharpnessBuffer
    history: SharpnessBuffer  # past setpoints, same window
    pid: PIDState = field(default_factory=PIDState)
    direction: DirectionState = field(default_factory=DirectionState)
    setpoint: float = 0.0

    @classmethod
    def initial(cls, cfg: AutofocusConfig = AutofocusConfig(), setpoint: float = 0.0) -> "AutofocusState":
        return cls(SharpnessBuffer(cfg.buffer_len), SharpnessBuffer(cfg.buffer_len), PIDState(),
                   DirectionState(), float(setpoint))


@dataclass(frozen=True)
class StepInfo:
    sharpness: float
    error: float
    setpoint: float


def autofocus_step(img, st: AutofocusState, cfg: AutofocusConfig = AutofocusConfig(),
                   T: float = FRAME_PERIOD) -> Tuple[float, AutofocusState, StepInfo]:
    """One controller cycle. Returns ``(setpoint, new state, info)``; ``st`` is left untouched."""
    if not T > 0:
        raise ValueError("T must be positive")
    s = frame_sharpness(img)
    e = sum_eval([s, st.buffer.ago()], [1, -1])
    p = st.setpoint
    p_old = st.history.ago()
    gain, offset, dstate = direction_update(e, s, p, p_old, st.direction, cfg)
    x = normalized_change(e, s, cfg.deadband)
    u, pid = pid_step(x, cfg.kp, cfg.ki, cfg.kd, T, st.pid)
    sp = saturation_eval(sum_eval([p, offset, gain * u], [1, 1, 1]), cfg.setpoint_min, cfg.setpoint_max)
    buf, hist = st.buffer.copy(), st.history.copy()
    buf.push(s)
    hist.push(p)
    return sp, AutofocusState(buf, hist, pid, dstate, sp), StepInfo(s, e, sp)


def simulate(plant_config: PlantConfig = PlantConfig(), cfg: AutofocusConfig = AutofocusConfig(),
             cycles: int = 800, T: float = FRAME_PERIOD) -> List[Tuple[int, float, float, float, float, float]]:
    """Closed loop with the plain functions; rows follow :data:`TRACE_COLUMNS`."""
    plant = FocusPlant.create(plant_config)
    st = AutofocusState.initial(cfg)
    img = render_scene(plant)
    rows = []
    for k in range(cycles):
        sp, st, info = autofocus_step(img, st, cfg, T)
        if not cfg.setpoint_min <= sp <= cfg.setpoint_max:
            raise AssertionError(f"setpoint {sp} left its range at cycle {k}")
        rows.append((k, info.sharpness, info.error, sp, plant.motor, plant_config.true_focus))
        plant = motor_step(plant, sp, T)
        img = render_scene(plant)
    return rows


def write_trace_csv(rows, path) -> None:
    """Write the trace to a path or an open text file."""
    if hasattr(path, "write"):
        _write_trace(rows, path)
        return
    with open(path, "w", newline="") as fh:
        _write_trace(rows, fh)


def _write_trace(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in rows:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def settle_cycle(rows, tolerance: float = 0.02, hold: int = 200) -> Optional[int]:
    """First cycle from which the motor stays within ``tolerance`` of focus for ``hold`` cycles."""
    run = 0
    for k, r in enumerate(rows):
        run = run + 1 if abs(r[4] - r[5]) <= tolerance else 0
        if run >= hold:
            return k - hold + 1
    return None


# ---------------------------------------------------------------------------
# block diagram form


@register_block
class FocusPlantBlock(Block):
    """Input: focus setpoint. Outputs: current frame and motor position."""

    kind = "FocusPlant"
    direct_feedthrough = False
    stateful = True

    def __init__(self, config: PlantConfig = PlantConfig(), T: float = FRAME_PERIOD):
        self.config = config
        self.T = float(T)
        super().__init__([SCALAR], [IMAGE, SCALAR], {"config": config, "T": T})

    def init_state(self, seed=None):
        # the plant keeps its own seed so runs match the plain simulation
        plant = FocusPlant.create(self.config)
        return [plant, render_scene(plant)]

    def output(self, state, inputs):
        plant, img = state
        return (img, plant.motor)

    def update(self, state, inputs):
        plant = motor_step(state[0], inputs[0], self.T)
        return [plant, render_scene(plant)]


@register_block
class FocusDirection(Block):
    """Inputs: e, s, setpoint, setpoint from the window start. Outputs: step gain, offset."""

    kind = "FocusDirection"
    direct_feedthrough = True
    stateful = True

    def __init__(self, config: AutofocusConfig = AutofocusConfig()):
        self.config = config
        super().__init__([SCALAR] * 4, [SCALAR, SCALAR], {"config": config})

    def init_state(self, seed=None):
        return DirectionState()

    def output(self, state, inputs):
        gain, offset, _ = direction_update(*inputs, state, self.config)
        return (gain, offset)

    def update(self, state, inputs):
        return direction_update(*inputs, state, self.config)[2]


@dataclass
class AutofocusDiagram:
    diagram: Diagram
    plant: Block
    sharpness: Block
    error: Block
    setpoint: Block


def build_autofocus_diagram(plant_config: PlantConfig = PlantConfig(), cfg: AutofocusConfig = AutofocusConfig(),
                            T: float = FRAME_PERIOD) -> AutofocusDiagram:
    d = Diagram()
    plant = d.add(FocusPlantBlock(plant_config, T), "plant")
    conv = d.add(Conv2D(), "laplacian")
    sharp = d.add(Sharpness(), "sharpness")
    sbuf = d.add(DelayN(cfg.buffer_len, 0.0), "sharpness_ago")
    err = d.add(Sum("+-"), "error")
    prev = d.add(UnitDelay(0.0), "setpoint_prev")
    hist = d.add(DelayN(cfg.buffer_len, 0.0), "setpoint_ago")
    direc = d.add(FocusDirection(cfg), "direction")
    dead = cfg.deadband
    norm = d.add(FunctionBlock(lambda e, s: normalized_change(e, s, dead), n_in=2), "normalize")
    pid = d.add(SimplePID(cfg.kp, cfg.ki, cfg.kd, T), "pid")
    step = d.add(Product(2), "step")
    acc = d.add(Sum("+++"), "accumulate")
    sat = d.add(Saturation(cfg.setpoint_min, cfg.setpoint_max), "setpoint")

    d.connect(plant.o(0), conv.i(0))
    d.connect(conv.o(0), sharp.i(0))
    d.connect(sharp.o(0), sbuf.i(0))
    d.connect(sharp.o(0), err.i(0))
    d.connect(sbuf.o(0), err.i(1))
    d.connect(prev.o(0), hist.i(0))
    d.connect(err.o(0), direc.i(0))
    d.connect(sharp.o(0), direc.i(1))
    d.connect(prev.o(0), direc.i(2))
    d.connect(hist.o(0), direc.i(3))
    d.connect(err.o(0), norm.i(0))
    d.connect(sharp.o(0), norm.i(1))
    d.connect(norm.o(0), pid.i(0))
    d.connect(direc.o(0), step.i(0))
    d.connect(pid.o(0), step.i(1))
    d.connect(prev.o(0), acc.i(0))
    d.connect(direc.o(1), acc.i(1))
    d.connect(step.o(0), acc.i(2))
    d.connect(acc.o(0), sat.i(0))
    d.connect(sat.o(0), plant.i(0))
    d.connect(sat.o(0), prev.i(0))
    return AutofocusDiagram(d, plant, sharp, err, sat)


def simulate_diagram(plant_config: PlantConfig = PlantConfig(), cfg: AutofocusConfig = AutofocusConfig(),
                     cycles: int = 800, T: float = FRAME_PERIOD):
    """Same trace as :func:`simulate`, produced by the diagram engine."""
    af = build_autofocus_diagram(plant_config, cfg, T)
    ex = Executor(af.diagram)
    rows = []
    for k in range(cycles):
        sig = ex.step()
        rows.append((k, sig[(af.sharpness.id, 0)], sig[(af.error.id, 0)], sig[(af.setpoint.id, 0)],
                     sig[(af.plant.id, 1)], plant_config.true_focus))
    return rows
