import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pemgrid import dynamics as dyn
from pemgrid.grid import GridModel


def setup(grid, cfg=dyn.DynConfig()):
    area_load = {a: sum(b.load_mw - b.renewable_mw for b in grid.buses if b.area == a)
                 for a in grid.areas}
    sched = {g.id: g.p_sched_mw for g in grid.generators}
    slack = [g for g in grid.generators if g.bus == grid.slack_bus][0]
    sched[slack.id] += sum(area_load.values()) - sum(sched.values())
    params = dyn.build_area_params(grid, sched, area_load, cfg)
    states = dyn.initial_states(params, sched, cfg)
    return params, states, [area_load[a] for a in grid.areas]


def run(states, load, params, cfg, seconds):
    f1 = []
    for _ in range(int(round(seconds / cfg.ts_dyn_s))):
        states = dyn.step_dynamics(states, load, cfg, params)
        f1.append(states[0].freq_hz)
    return states, np.array(f1)


def test_equilibrium_is_fixed_point(five_bus):
    cfg = dyn.DynConfig()
    params, states, load = setup(five_bus, cfg)
    after, _ = run(states, load, params, cfg, 30.0)
    for s0, s1 in zip(states, after):
        assert s1.delta_omega_pu == 0.0 and s1.tie_flow_dev_mw == 0.0
        assert [m.p_mech_mw for m in s1.machines] == [m.p_mech_mw for m in s0.machines]


def test_droop_steady_state(five_bus):
    cfg = dyn.DynConfig()
    params, states, load = setup(five_bus, cfg)
    load[0] += 10.0
    states, f = run(states, load, params, cfg, 300.0)
    expected = -10.0 / dyn.composite_stiffness_mw_per_pu(params) * cfg.nominal_hz
    assert f[-1] - 60.0 == pytest.approx(expected, rel=0.01)
    assert states[1].freq_hz - 60.0 == pytest.approx(expected, rel=0.01)


def test_tie_antisymmetry(five_bus):
    cfg = dyn.DynConfig()
    params, states, load = setup(five_bus, cfg)
    load[0] -= 50.0
    for _ in range(200):
        states = dyn.step_dynamics(states, load, cfg, params)
        assert states[0].tie_flow_dev_mw == -states[1].tie_flow_dev_mw


def test_heavier_external_machine_softens_nadir(five_bus):
    cfg = dyn.DynConfig()
    nadir = {}
    for mult in (1.0, 10.0):
        gens = tuple(replace(g, inertia_h_s=g.inertia_h_s * mult) if g.id == "G3" else g
                     for g in five_bus.generators)
        grid = GridModel(five_bus.buses, five_bus.lines, gens, five_bus.vpps,
                         five_bus.base_mva, five_bus.slack_bus)
        params, states, load = setup(grid, cfg)
        load[0] += 20.0
        _, f = run(states, load, params, cfg, 60.0)
        nadir[mult] = f.min()
    assert nadir[10.0] > nadir[1.0]


def test_mechanical_power_ramp_and_limits(five_bus):
    cfg = dyn.DynConfig()
    params, states, load = setup(five_bus, cfg)
    load[0] += 400.0  # far beyond the area's headroom
    prev = [m.p_mech_mw for m in states[0].machines]
    for _ in range(600):
        states = dyn.step_dynamics(states, load, cfg, params)
        cur = [m.p_mech_mw for m in states[0].machines]
        for mp, a, b in zip(params[0].machines, prev, cur):
            assert abs(b - a) <= mp.ramp_mw_per_s * cfg.ts_dyn_s + 1e-9
            assert mp.p_min_mw <= b <= mp.p_max_mw
        prev = cur


def test_unstable_step_raised(five_bus):
    cfg = dyn.DynConfig()
    params, states, load = setup(five_bus, cfg)
    with pytest.raises(dyn.UnstableStep):
        dyn.step_dynamics(states, [math.inf, load[1]], cfg, params)


def test_config_stability_margin():
    with pytest.raises(ValueError):
        dyn.DynConfig(ts_dyn_s=0.5)


def test_mean_frequency():
    assert dyn.mean_frequency([60.0, 60.0], [3.0, 5.0]) == 60.0
    assert dyn.mean_frequency([59.9, 60.1], [1.0, 1.0]) == pytest.approx(60.0)
    assert dyn.mean_frequency([60.02, 59.98, 59.98], [2.0, 1.0, 1.0]) == pytest.approx(60.0)
    with pytest.raises(ValueError):
        dyn.mean_frequency([], [])


@settings(max_examples=25, deadline=None)
@given(st.floats(-60, 60), st.floats(-200, 200))
def test_states_stay_finite_and_bounded(five_bus, d1, d2):
    cfg = dyn.DynConfig()
    params, states, load = setup(five_bus, cfg)
    load = [load[0] + d1, load[1] + d2]
    states, f = run(states, load, params, cfg, 20.0)
    assert np.all(np.isfinite(f))
    for s, ap in zip(states, params):
        for m, mp in zip(s.machines, ap.machines):
            assert mp.p_min_mw <= m.p_mech_mw <= mp.p_max_mw
