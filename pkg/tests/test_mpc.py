import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pemgrid import mpc
from pemgrid.grid import grid_from_dict
from pemgrid.mpc import MeasuredState, MpcConfig, MpcController, build_problem, soc_rollout

from oracles import tiny_dispatch_bruteforce


def one_bus(load=90.0, s0=0.0, s_max=1000.0, p_ch_max=1000.0, ramp=1.0e4):
    return grid_from_dict({
        "name": "tiny", "base_mva": 100.0, "slack_bus": 1,
        "buses": [{"id": 1, "area": 1, "load_mw": load}],
        "lines": [],
        "generators": [{"id": "G", "bus": 1, "p_min_mw": 0.0, "p_max_mw": 1000.0,
                        "ramp_mw_per_min": 1.0e4, "droop_pct": 0.05, "inertia_h_s": 5.0,
                        "deviation_cost": 1.0, "p_sched_mw": 100.0}],
        "vpps": [{"id": "B", "bus": 1, "kind": "bulk_battery", "p_ch_max_mw": p_ch_max,
                  "p_dis_max_mw": p_ch_max, "ramp_ch_mw_per_min": ramp,
                  "ramp_dis_mw_per_min": ramp, "s_min_mwh": 0.0, "s_max_mwh": s_max,
                  "s0_mwh": s0}],
    })


def measured(grid, t=0.0, pg=None, pv=None, soc=None):
    return MeasuredState(
        t_s=t,
        p_gen_mw={g.id: (pg if pg is not None else g.p_sched_mw) for g in grid.generators},
        p_vpp_mw={v.id: (pv if pv is not None else 0.0) for v in grid.vpps},
        soc_mwh={v.id: (soc if soc is not None else v.s0_mwh) for v in grid.vpps},
    )


def solve(grid, cfg, meas, ref, load):
    inst = build_problem(grid, meas, ref, load, cfg)
    sol = mpc.solve_instance(inst)
    assert sol.status == "optimal"
    return inst, mpc.extract_trajectory(inst, sol)


CFG2 = MpcConfig(horizon_m=2)


def test_deviation_free_point_is_optimal():
    g = one_bus()
    inst, tr = solve(g, CFG2, measured(g, pg=100.0, pv=10.0, soc=0.0), [100.0], [90.0])
    np.testing.assert_allclose(tr.p_gen[:, 0], 100.0, atol=1e-5)
    np.testing.assert_allclose(tr.p_ch[:, 0] - tr.p_dis[:, 0], 10.0, atol=1e-5)
    assert tr.deviation_cost == pytest.approx(0.0, abs=1e-8)


def test_full_store_forces_generator_down():
    g = one_bus(s0=1000.0)
    inst, tr = solve(g, CFG2, measured(g, pg=90.0, soc=1000.0), [100.0], [90.0])
    np.testing.assert_allclose(tr.p_ch[:, 0], 0.0, atol=1e-5)
    np.testing.assert_allclose(tr.p_gen[:, 0], 90.0, atol=1e-5)
    assert tr.deviation_cost == pytest.approx(3 * 10.0 ** 2, rel=1e-6)


def test_zero_disturbance_returns_references(five_bus):
    cfg = MpcConfig(horizon_m=5)
    meas = measured(five_bus)
    refs = [g.p_sched_mw for g in five_bus.generators]
    loads = [b.net_load_mw for b in five_bus.buses]
    inst, tr = solve(five_bus, cfg, meas, refs, loads)
    np.testing.assert_allclose(tr.p_gen, np.tile(refs, (6, 1)), atol=1e-5)
    assert tr.deviation_cost < 1e-8
    assert mpc.verify_trajectory(inst, tr) == []


def test_matches_bruteforce_on_single_bus(single_bus):
    cfg = MpcConfig(horizon_m=2)
    best, cost = tiny_dispatch_bruteforce()
    meas = measured(single_bus, pg=98.0, pv=0.0, soc=0.95)
    inst, tr = solve(single_bus, cfg, meas, [100.0], [98.0])
    np.testing.assert_allclose(tr.p_ch[:, 0], best, atol=0.05)
    np.testing.assert_allclose(tr.p_gen[:, 0], 98.0 + np.array(best), atol=0.05)
    assert tr.deviation_cost == pytest.approx(cost, abs=0.1)
    assert mpc.verify_trajectory(inst, tr) == []


def test_halved_horizon_same_first_step():
    g = one_bus()
    meas = measured(g, pg=95.0, pv=0.0, soc=0.0)
    first = []
    for m in (8, 4):
        _, tr = solve(g, MpcConfig(horizon_m=m), meas, [100.0], [90.0])
        first.append(tr.first_step(g))
    for k in first[0]:
        assert first[0][k] == pytest.approx(first[1][k], abs=1e-5)


def test_internal_energy_matches_rollout(five_bus):
    cfg = MpcConfig(horizon_m=10)
    meas = measured(five_bus)
    refs = [g.p_sched_mw for g in five_bus.generators]
    loads = np.array([b.net_load_mw for b in five_bus.buses])
    loads[0] -= 50.0
    inst, tr = solve(five_bus, cfg, meas, refs, loads)
    for j, v in enumerate(five_bus.vpps):
        roll = soc_rollout(inst.s0[j], tr.p_ch[:, j], tr.p_dis[:, j], v, cfg.ts_s)
        np.testing.assert_allclose(roll, tr.soc[:, j], atol=1e-9, rtol=0)
    assert inst.index.is_bijective()


def test_soc_rollout_examples():
    b = one_bus().vpps[0]
    s = soc_rollout(22.5, np.full(30, 45.0), np.zeros(30), b, 60.0)
    assert s[-1] == pytest.approx(45.0, abs=1e-12)
    assert np.all(soc_rollout(3.0, np.zeros(5), np.zeros(5), b, 60.0) == 3.0)
    lossy = type(b)(**{**b.__dict__, "eta_dis": 0.9})
    s = soc_rollout(5.0, [0.0], [9.0], lossy, 360.0)
    assert s[0] - s[1] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        soc_rollout(0.0, [1.0, 2.0], [0.0], b, 60.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 50), st.lists(st.floats(0, 20), min_size=1, max_size=12))
def test_rollout_is_a_running_sum(s0, pch):
    b = one_bus().vpps[0]
    s = soc_rollout(s0, pch, np.zeros(len(pch)), b, 60.0)
    np.testing.assert_allclose(np.diff(s), np.asarray(pch) / 60.0, atol=1e-12)


def test_forecast_gap_and_shape_errors(five_bus):
    meas = measured(five_bus)
    refs = [g.p_sched_mw for g in five_bus.generators]
    short = np.zeros((3, five_bus.n_bus))
    with pytest.raises(mpc.ForecastGap):
        build_problem(five_bus, meas, refs, short, MpcConfig(horizon_m=5))
    with pytest.raises(ValueError):
        build_problem(five_bus, meas, refs[:-1], np.zeros(five_bus.n_bus), MpcConfig(horizon_m=5))


@pytest.mark.parametrize("kw", [dict(horizon_m=1), dict(ts_s=1.0), dict(load_forecast_source="oracle")])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        MpcConfig(**kw)


def test_out_of_box_measurement_is_clamped():
    g = one_bus(s_max=10.0)
    with pytest.warns(mpc.InfeasibleInitialState):
        inst = build_problem(g, measured(g, soc=12.0), [100.0], [90.0], CFG2)
    assert inst.s0[0] == 10.0


def test_repeated_calls_are_identical(five_bus):
    ctl = MpcController(five_bus, MpcConfig(horizon_m=6))
    meas = measured(five_bus)
    refs = [g.p_sched_mw for g in five_bus.generators]
    loads = np.array([b.net_load_mw for b in five_bus.buses]) + 5.0
    a = ctl.step(meas, refs, loads)
    b = ctl.step(meas, refs, loads)
    assert a.commands == b.commands
    assert not a.fallback


def test_infeasible_holds_last_commands():
    g = one_bus(p_ch_max=1.0)
    ctl = MpcController(g, CFG2)
    first = ctl.step(measured(g, pg=100.0), [100.0], [90.0])
    # load beyond every generator and storage limit
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", mpc.InfeasibleInitialState)
        with pytest.warns(mpc.MpcInfeasible):
            held = ctl.step(measured(g, pg=100.0), [100.0], [5000.0])
    assert held.fallback and held.status == "infeasible"
    assert held.commands == first.commands


def test_debug_dumps(tmp_path):
    g = one_bus()
    ctl = MpcController(g, CFG2, dump_dir=tmp_path)
    ctl.step(measured(g), [100.0], [90.0])
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["mpc_00001.qp", "mpc_00001.x"]
    assert (tmp_path / "mpc_00001.x").read_text().startswith("status optimal")


def test_receding_step_returns_first_commands(five_bus):
    meas = measured(five_bus)
    refs = [g.p_sched_mw for g in five_bus.generators]
    loads = [b.net_load_mw for b in five_bus.buses]
    inst = build_problem(five_bus, meas, refs, loads, MpcConfig(horizon_m=4))
    cmds, tr = mpc.receding_horizon_step(inst)
    assert cmds == tr.first_step(five_bus)
    assert set(cmds) == {g.id for g in five_bus.generators} | {v.id for v in five_bus.vpps}
