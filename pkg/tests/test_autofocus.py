import dataclasses
import io

import numpy as np
import pytest

from blockflow.autofocus import (FRAME_PERIOD, TRACE_COLUMNS, AutofocusConfig, AutofocusState, FocusPlant,
                                 PlantConfig, SharpnessBuffer, autofocus_step, build_autofocus_diagram,
                                 frame_sharpness, motor_step, normalized_change, render_scene, settle_cycle,
                                 sharpness_sweep, simulate, simulate_diagram, write_trace_csv)
from blockflow.graph import validate_diagram


def test_buffer_warm_up_reads_zero():
    b = SharpnessBuffer(100)
    for k in range(100):
        assert b.ago() == 0.0
        b.push(k + 1.0)
    assert b.ago() == 1.0
    b.push(101.0)
    assert b.ago() == 2.0
    with pytest.raises(ValueError):
        SharpnessBuffer(0)


def test_motor_step_examples():
    plant = FocusPlant.create(PlantConfig(initial_motor=0.3))
    assert motor_step(plant, 0.3).motor == 0.3
    fast = FocusPlant.create(PlantConfig(motor_tau=0.0))
    assert motor_step(fast, 0.5).motor == 0.5
    with pytest.raises(ValueError):
        motor_step(plant, 0.5, 0.0)


def test_motor_follows_first_order_lag():
    cfg = PlantConfig(motor_tau=0.12)
    plant = FocusPlant.create(cfg)
    a = FRAME_PERIOD / cfg.motor_tau
    prev = plant.motor
    for k in range(1, 60):
        plant = motor_step(plant, 1.0)
        assert plant.motor > prev
        prev = plant.motor
        assert plant.motor == pytest.approx(1 - (1 - a) ** k, abs=1e-12)


def test_sweep_peaks_at_true_focus():
    motors = np.linspace(0, 1, 201)
    for tf in (0.2, 0.45, 0.7):
        s = sharpness_sweep(PlantConfig(true_focus=tf), motors)
        assert abs(motors[int(np.argmax(s))] - tf) <= 0.02


def test_in_focus_is_twice_as_sharp_as_far_off():
    cfg = PlantConfig(noise=0.0)
    near, far = sharpness_sweep(cfg, [cfg.true_focus, 0.0])
    assert near / far > 2


def test_render_is_deterministic_per_seed():
    a = render_scene(FocusPlant.create(PlantConfig(seed=5)))
    b = render_scene(FocusPlant.create(PlantConfig(seed=5)))
    c = render_scene(FocusPlant.create(PlantConfig(seed=6)))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_config_validation():
    with pytest.raises(ValueError):
        PlantConfig(sigma0=0.0)
    with pytest.raises(ValueError):
        AutofocusConfig(gain_decay=0.0)
    with pytest.raises(ValueError):
        AutofocusConfig(setpoint_min=1.0, setpoint_max=0.5)


def test_normalized_change():
    assert normalized_change(0.5, 0.0, 0.01) == 0.0
    assert normalized_change(0.005, 1.0, 0.01) == 0.0
    assert normalized_change(-0.5, 2.0, 0.01) == 0.25


def test_stationary_scene_settles_without_drift():
    img = render_scene(FocusPlant.create(PlantConfig(noise=0.0)))
    st = AutofocusState.initial()
    sps = []
    for _ in range(300):
        sp, st, info = autofocus_step(img, st)
        sps.append(sp)
    # after warm-up the buffered change is exactly zero and the setpoint holds
    assert info.error == 0.0
    assert len(set(sps[101:])) == 1


def test_step_leaves_input_state_untouched():
    img = render_scene(FocusPlant.create(PlantConfig()))
    st = AutofocusState.initial()
    autofocus_step(img, st)
    assert st.buffer.count == 0 and st.setpoint == 0.0
    with pytest.raises(ValueError):
        autofocus_step(img, st, T=0.0)


def test_closed_loop_reaches_focus_and_holds():
    rows = simulate(PlantConfig(true_focus=0.45, initial_motor=0.0), cycles=800)
    assert settle_cycle(rows, 0.02, 200) is not None
    assert all(0.0 <= r[3] <= 0.6 for r in rows)


@pytest.mark.parametrize("seed", range(10))
def test_converges_with_noise(seed):
    cfg = PlantConfig(noise=0.05, seed=seed)
    rows = simulate(cfg, cycles=700)
    assert settle_cycle(rows, 0.04, 200) is not None
    assert all(0.0 <= r[3] <= 0.6 for r in rows)


def test_focus_beyond_ceiling_pins_setpoint():
    rows = simulate(PlantConfig(true_focus=0.9), cycles=700)
    assert all(r[3] == 0.6 for r in rows[-200:])
    assert max(r[3] for r in rows) == 0.6


def test_diagram_matches_hand_trace():
    af = build_autofocus_diagram()
    assert validate_diagram(af.diagram).ok
    hand = simulate(cycles=500)
    eng = simulate_diagram(cycles=500)
    np.testing.assert_allclose(np.array(eng), np.array(hand), rtol=0, atol=1e-12)


def test_trace_csv():
    rows = simulate(cycles=3)
    buf = io.StringIO()
    write_trace_csv(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 4
    assert lines[1].startswith("0,")
