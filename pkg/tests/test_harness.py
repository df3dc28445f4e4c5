import dataclasses

import numpy as np
import pytest

from pemgrid import harness
from pemgrid.harness import ConfigError, parse_scenario, run_scenario


def script(**over):
    base = {"name": "t", "grid": "five_bus", "controller": "droop_only", "duration_s": 120,
            "remove_vpps": ["fleet"]}
    base.update(over)
    return parse_scenario(base)


AGC = {"participation": {1: {"battery": 1.0}, 2: {"G3": 1.0}}}


@pytest.fixture(scope="module")
def agc_trace():
    s = script(controller="agc", agc=AGC, duration_s=400,
               events=[{"time_s": 30, "kind": "load_step", "bus": 2, "magnitude_mw": 8.0}])
    return run_scenario(s)


@pytest.mark.parametrize("controller", ["droop_only", "agc", "mpc"])
def test_no_events_no_motion(controller):
    kw = {"agc": AGC} if controller == "agc" else {}
    tr = run_scenario(script(controller=controller, duration_s=180, **kw))
    # MPC set-points are only as exact as the QP tolerance
    tol = 1e-5 if controller == "mpc" else 1e-9
    assert np.max(np.abs(tr.column("freq_hz") - 60.0)) < tol
    assert np.max(np.abs(tr.column("ace_mw"))) < 1e3 * tol
    for c in tr.columns:
        if c.startswith("gen") or c.startswith("line"):
            assert np.ptp(tr.column(c)) < 1e3 * tol, c


def test_power_accounting(agc_trace):
    tr = agc_trace
    gen = sum(tr.column(c) for c in tr.columns if c.startswith("gen"))
    vpp = sum(tr.column(f"vpp{j + 1}_mw") for j in range(len(tr.vpp_names())))
    resid = gen - tr.column("load_mw") - vpp - tr.column("swing_mw")
    assert np.max(np.abs(resid)) < 1e-3


def test_event_applied_at_its_time(agc_trace):
    load = agc_trace.column("load_mw")
    t = agc_trace.t_s
    assert np.all(load[t < 30] == load[0])
    assert np.all(load[t >= 30] == pytest.approx(load[0] + 8.0))
    f = agc_trace.column("freq_hz")
    assert np.all(f[t <= 30] == pytest.approx(60.0, abs=1e-9))
    assert f[t == 31][0] < 60.0


def test_agc_moves_the_battery_not_g2(agc_trace):
    tr = agc_trace
    assert tr.vpp_column("battery", "mw")[-1] == pytest.approx(-8.0, abs=0.2)
    assert abs(tr.gen_column("G2")[-1] - tr.gen_column("G2")[0]) < 0.5


def test_reference_change_event():
    tr = run_scenario(script(duration_s=60, events=[
        {"time_s": 5, "kind": "reference_change", "resource": "battery", "magnitude_mw": 3.0}]))
    ref = tr.vpp_column("battery", "ref_mw")
    assert ref[0] == 0.0 and ref[-1] == 3.0
    assert tr.vpp_column("battery", "mw")[-1] == pytest.approx(3.0)


@pytest.mark.parametrize("over, path", [
    ({"controller": "pid"}, "controller"),
    ({"duration_s": -5}, "duration_s"),
    ({"bogus": 1}, "bogus"),
    ({"events": [{"time_s": 1, "kind": "quake", "bus": 2, "magnitude_mw": 1}]}, "events[0].kind"),
    ({"events": [{"time_s": 1, "kind": "load_step", "magnitude_mw": 1}]}, "events[0].bus"),
    ({"events": [{"time_s": 5, "kind": "load_step", "bus": 2, "magnitude_mw": 1},
                 {"time_s": 1, "kind": "load_step", "bus": 2, "magnitude_mw": 1}]}, "events[1].time_s"),
    ({"controller": "agc"}, "agc"),
    ({"mpc": {"horizon_m": 0}}, "mpc"),
    ({"mpc": {"horizon": 5}}, "mpc.horizon"),
])
def test_parse_errors_name_the_field(over, path):
    with pytest.raises(ConfigError) as exc:
        script(**over)
    assert exc.value.path == path


@pytest.mark.parametrize("over, path", [
    ({"events": [{"time_s": 1, "kind": "load_step", "bus": 42, "magnitude_mw": 1}]}, "events[0].bus"),
    ({"events": [{"time_s": 500, "kind": "load_step", "bus": 2, "magnitude_mw": 1}]}, "events[0].time_s"),
    ({"events": [{"time_s": 1, "kind": "reference_change", "resource": "G9", "magnitude_mw": 1}]},
     "events[0].resource"),
    ({"remove_vpps": []}, "fleet"),
    ({"controller": "agc", "agc": {"participation": {1: {"battery": 0.5}, 2: {"G3": 1.0}}}},
     "agc.participation.1"),
    ({"controller": "agc", "agc": {"participation": {3: {"G3": 1.0}}}}, "agc.participation.3"),
    ({"vpp_overrides": {"nope": {"eta_ch": 1.0}}}, "vpp_overrides.nope"),
    ({"sample_s": 2.0}, "sample_s"),
])
def test_validation_errors_name_the_field(over, path):
    with pytest.raises(ConfigError) as exc:
        harness.validate_scenario(script(**over))
    assert exc.value.path == path


def test_missing_scenario_file(tmp_path):
    with pytest.raises(ConfigError):
        harness.load_scenario(tmp_path / "none.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed\n")
    with pytest.raises(ConfigError):
        harness.load_scenario(bad)


def test_exponent_literals_are_numbers(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("name: s\ngrid: five_bus\ncontroller: droop_only\nduration_s: 1e2\n"
                 "remove_vpps: [fleet]\nvpp_overrides: {battery: {ramp_ch_mw_per_min: 1e6}}\n")
    s = harness.load_scenario(p)
    assert s.duration_s == 100.0
    assert harness.scenario_grid(s).vpp("battery").ramp_ch_mw_per_min == 1e6


def test_bundled_scenarios_validate():
    names = harness.list_scenarios()
    assert {"fig4_agc_saturation", "fig5_mpc", "agc_step_20mw", "droop_step_10mw"} <= set(names)
    for n in names:
        harness.validate_scenario(harness.load_scenario(n))


def test_compare_self_is_zero(agc_trace):
    rep = harness.compare_runs(agc_trace, agc_trace)
    for a, b, d in rep.values():
        assert d is None or d == 0.0


def test_compare_rejects_different_grids(agc_trace):
    short = harness.SimTrace(agc_trace.columns, agc_trace.data[:10], agc_trace.meta)
    with pytest.raises(harness.GridMismatch):
        harness.compare_runs(agc_trace, short)


def test_metrics_on_a_flat_trace():
    cols = ["t_s", "freq_hz", "ace_mw", "vpp1_mw", "vpp1_ref_mw", "vpp1_soc_pct"]
    data = np.zeros((5, len(cols)))
    data[:, 0] = np.arange(5)
    data[:, 1] = 60.0
    m = harness.trace_metrics(harness.SimTrace(cols, data, {"vpps": ["b"]}))
    assert m == {"peak_abs_df_hz": 0.0, "ace_rms_mw": 0.0, "vpp1_saturation_s": None,
                 "vpp1_service_s": 4.0}


def test_saturation_needs_full_and_idle():
    cols = ["t_s", "freq_hz", "ace_mw", "vpp1_mw", "vpp1_ref_mw", "vpp1_soc_pct"]
    data = np.array([[0, 60, 0, 5.0, 5.0, 99.0],
                     [1, 60, 0, 5.0, 5.0, 99.8],
                     [2, 60, 0, 0.0, 5.0, 100.0]])
    tr = harness.SimTrace(cols, data, {"vpps": ["b"]})
    assert harness.saturation_time(tr, 1) == 2.0
    assert harness.service_duration(tr, 1) == 1.0


def test_csv_roundtrip_and_svg(tmp_path):
    tr = run_scenario(script(duration_s=3))
    out = harness.export(tr, tmp_path / "a.csv", tmp_path / "a.svg")
    assert [p.name for p in out] == ["a.csv", "a.svg"]
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].split(",") == tr.columns
    assert len(lines) == 4
    back = harness.SimTrace.from_csv(tmp_path / "a.csv")
    np.testing.assert_allclose(back.data, tr.data, atol=1e-6)
    assert (tmp_path / "a.svg").read_text().lstrip().startswith("<?xml")


def test_same_seed_same_bytes():
    s = harness.load_scenario("agc_step_20mw")
    s = dataclasses.replace(s, duration_s=120, fleet=dataclasses.replace(s.fleet, warmup_s=60))
    a, b = run_scenario(s), run_scenario(s)
    assert a.csv_text() == b.csv_text()
    c = run_scenario(s, seed=s.seed + 1)
    assert c.csv_text() != a.csv_text()


def test_event_log_written(tmp_path):
    s = harness.load_scenario("agc_step_20mw")
    s = dataclasses.replace(s, duration_s=30, events=(), fleet=dataclasses.replace(s.fleet, warmup_s=30))
    log = tmp_path / "ev.jsonl"
    run_scenario(s, event_log=log)
    assert log.exists() and log.stat().st_size > 0


def test_bundled_population_found_from_elsewhere(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("name: s\ngrid: five_bus\ncontroller: droop_only\nduration_s: 10\n"
                 "fleet: {vpp: fleet, population: hil_fleet.population.yaml, warmup_s: 0}\n")
    s = harness.load_scenario(p)
    assert sum(g.count for g in s.fleet.groups) > 0
