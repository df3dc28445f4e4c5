import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from pemgrid.pem import (DeviceGroup, DeviceState, Fleet, InvalidGrant, Mode, PacketRequest,
                         PemDeviceConfig, request_probability, step_device, step_fleet)

TCL = PemDeviceConfig("tcl", 4.5, 300.0, 300.0, 45.0, 55.0, 50.0, 1 / 60,
                      capacitance_kwh_per_c=0.29, resistance_c_per_kw=67.5, ambient_c=20.0)
ESS = PemDeviceConfig("ess", 5.0, 300.0, 300.0, 1.35, 12.15, 6.75, 1 / 60, eta_ch=1.0, eta_dis=1.0)

# share of time a lone TCL (parameters above) draws power when every request is
# granted; 50,000-step run of oracles.tcl_duty_cycle with seed 1
DUTY_ORACLE = 0.114


def test_probability_examples():
    assert request_probability(TCL.x_max, TCL, 1.0) == 0.0
    cfg = PemDeviceConfig("tcl", 4.5, 300, 300, 40.0, 60.0, 50.0, 0.1, capacitance_kwh_per_c=1,
                          resistance_c_per_kw=1)
    assert request_probability(50.0, cfg, 1.0) == pytest.approx(1 - math.exp(-0.1))
    assert request_probability(40.0 + 1e-9, cfg, 1.0) > 0.999
    assert request_probability(ESS.x_min, ESS, 1.0, "discharge") == 0.0


@settings(max_examples=100)
@given(st.floats(45.0, 55.0), st.floats(45.0, 55.0), st.floats(0.1, 10.0))
def test_probability_bounded_and_monotone(a, b, dt):
    lo, hi = min(a, b), max(a, b)
    pl, ph = request_probability(lo, TCL, dt), request_probability(hi, TCL, dt)
    assert 0.0 <= ph <= pl <= 1.0


def _granted(cfg, x, kind):
    return DeviceState(Mode.OFF, x, pending=kind)


def test_charge_packet_runs_exactly_its_length():
    st_, _, _ = step_device(_granted(ESS, 5.0, "charge"), ESS, True, 1.0, u=(1.0, 0.0))
    on = 1
    while st_.mode == Mode.CHARGE:
        st_, req, _ = step_device(st_, ESS, None, 1.0, u=(1.0, 0.0))
        on += 1
    assert on == 300 and st_.mode == Mode.OFF
    # eta = 1: energy added is rated power times packet length
    assert st_.x - 5.0 == pytest.approx(5.0 * 300 / 3600)


def test_opt_out_heats_until_setpoint():
    st_ = DeviceState(Mode.OFF, TCL.x_min + 1e-6)
    st_, req, p = step_device(st_, TCL, None, 1.0, u=(1.0, 0.0))
    assert st_.mode == Mode.OPT_OUT and req is None
    steps = 0
    while st_.mode == Mode.OPT_OUT:
        st_, req, p = step_device(st_, TCL, None, 1.0, u=(0.0, 0.0))
        assert p == TCL.rated_power_kw
        assert req is None or st_.mode == Mode.OFF
        steps += 1
    assert st_.x >= TCL.setpoint and steps > 100


def test_grant_without_request():
    with pytest.raises(InvalidGrant):
        step_device(DeviceState(Mode.OFF, 50.0), TCL, True, 1.0)
    f = Fleet([TCL] * 3, seed=0)
    with pytest.raises(InvalidGrant):
        step_fleet(f, {1: True}, 1.0)


def test_no_request_that_would_overshoot():
    near_top = TCL.x_max - 0.5 * TCL.charge_packet_rise()
    _, req, _ = step_device(DeviceState(Mode.OFF, near_top), TCL, None, 1.0, u=(0.0, 0.0))
    assert req is None


def test_request_record_roundtrip():
    r = PacketRequest(7, "charge", 12.5, 4.5, 0.375)
    assert PacketRequest.from_record(r.to_record()) == r
    with pytest.raises(ValueError):
        PacketRequest.from_record({**r.to_record(), "v": 99})


def test_fleet_matches_single_device_path():
    configs = [TCL, ESS, TCL, ESS]
    x0 = [47.0, 3.0, 53.0, 10.0]
    seed = 5
    fleet = Fleet(configs, seed, x0=x0)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
    singles = [DeviceState(Mode.OFF, x, rng_stream=i) for i, x in enumerate(x0)]
    draws = None
    grant_next = [None] * 4
    for k in range(900):
        if k % Fleet.BLOCK == 0:
            draws = [g.random((Fleet.BLOCK, 2)) for g in streams]
        accept = np.array([g is not None for g in grant_next])
        fs = fleet.step(accept if accept.any() else None)
        total = 0.0
        for i in range(4):
            singles[i], req, p = step_device(singles[i], configs[i], grant_next[i], 1.0,
                                             u=draws[i][k % Fleet.BLOCK], t_s=float(k),
                                             device_id=i)
            total += p
            grant_next[i] = True if req is not None else None
        assert fs.power_mw == pytest.approx(total / 1000.0, abs=1e-12)
        np.testing.assert_allclose(fleet.x, [s.x for s in singles], rtol=0, atol=1e-12)
        assert list(fleet.mode) == [int(s.mode) for s in singles]


def test_all_rejected_gives_zero_power():
    f = Fleet([TCL] * 1000, seed=2)
    for _ in range(30):
        st_ = f.step(np.zeros(f.n, dtype=bool))
        assert st_.power_mw == 0.0


def _accept_all_run(seed, steps, warm):
    x0 = np.random.default_rng(seed).uniform(46.0, 54.0, 1000)
    f = Fleet([TCL] * 1000, seed=seed, x0=x0)
    p = []
    for k in range(steps):
        s = f.step(f.pending > 0)
        if k >= warm:
            p.append(s.power_mw)
    return float(np.mean(p))


def test_duty_cycle_oracle_reproducible():
    d = oracles.tcl_duty_cycle(4.5, 0.29, 67.5, 20.0, 45.0, 55.0, 1 / 60, 300.0, seed=1)
    assert d == pytest.approx(DUTY_ORACLE, abs=5e-4)


def test_accept_all_matches_duty_cycle():
    expected = 1000 * 4.5 * DUTY_ORACLE / 1000.0
    assert _accept_all_run(11, 14400, 3600) == pytest.approx(expected, rel=0.10)


def test_same_seed_same_requests():
    def trace(seed):
        f = Fleet([TCL, ESS] * 50, seed=seed)
        out = []
        for _ in range(400):
            s = f.step(f.pending > 0)
            out.append((s.request_ids.tobytes(), s.request_times.tobytes(), s.power_mw))
        return out
    assert trace(4) == trace(4)
    assert trace(4) != trace(5)


def test_requests_only_from_off():
    f = Fleet([TCL, ESS] * 100, seed=8)
    rng = np.random.default_rng(0)
    for _ in range(1500):
        s = f.step((f.pending > 0) & (rng.random(f.n) < 0.5))
        assert np.all(f.mode[s.request_ids] == Mode.OFF)
        assert np.all(f.pending[f.mode != Mode.OFF] == 0)


def test_packets_exact_and_qos_band():
    f = Fleet([TCL, ESS] * 200, seed=3, track_events=True)
    rng = np.random.default_rng(1)
    for _ in range(3600):
        f.step((f.pending > 0) & (rng.random(f.n) < 0.3))
    assert f.packet_lengths[Mode.CHARGE] and f.packet_lengths[Mode.DISCHARGE]
    assert set(f.packet_lengths[Mode.CHARGE]) == {300.0}
    assert set(f.packet_lengths[Mode.DISCHARGE]) == {300.0}
    h = f.rated_power_kw / 3600.0 / np.where(f.is_tcl, f.capacitance_kwh_per_c, f.eta_dis)
    assert np.all(f.x_lo_seen >= f.x_min - h) and np.all(f.x_hi_seen <= f.x_max + h)


def test_event_log(tmp_path):
    f = Fleet([ESS] * 5, seed=1, track_events=True)
    for _ in range(200):
        f.step(f.pending > 0)
    path = tmp_path / "events.csv"
    f.write_event_log(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t_s,device,from_mode,to_mode" and len(lines) == len(f.events) + 1


def test_groups_are_deterministic_and_in_range():
    g = DeviceGroup("tcl", 50, 4.5, 300.0, 300.0, 45.0, 55.0, 50.0, 1 / 60,
                    capacitance_kwh_per_c=[0.25, 0.33], resistance_c_per_kw=[60, 75])
    a, b = Fleet.from_groups([g], seed=9), Fleet.from_groups([g], seed=9)
    np.testing.assert_array_equal(a.capacitance_kwh_per_c, b.capacitance_kwh_per_c)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.capacitance_kwh_per_c.min() >= 0.25 and a.capacitance_kwh_per_c.max() <= 0.33
    assert np.all((a.x >= 47.5) & (a.x <= 52.5))


def test_bad_config():
    with pytest.raises(ValueError):
        PemDeviceConfig("ev", 1, 1, 1, 0, 2, 1, 1)
    with pytest.raises(ValueError):
        PemDeviceConfig("ess", 1, 1, 1, 0, 2, 3, 1)
