import inspect
import math

import pytest
from hypothesis import given, settings, strategies as st

from pemgrid import agc

UNLIMITED = agc.ResourceLimits(-math.inf, math.inf)


def test_ace_arithmetic():
    cfg = agc.AgcConfig(400.0, {"G": 1.0})
    assert agc.compute_ace(0.0, 0.0, cfg) == 0.0
    assert agc.compute_ace(-0.05, 0.0, cfg) == pytest.approx(-20.0)
    assert agc.compute_ace(-0.05, -10.0, cfg) == pytest.approx(-30.0)


def test_zero_ace_zero_commands():
    cfg = agc.AgcConfig(400.0, {"G": 0.5, "B": 0.5})
    st_ = agc.AgcState()
    for _ in range(100):
        out = agc.agc_dispatch(st_, 0.0, cfg, {"G": UNLIMITED, "B": UNLIMITED})
        st_ = out.state
        assert out.commands == {"G": 0.0, "B": 0.0}


def test_integral_loop_settles_monotonically():
    cfg = agc.AgcConfig(400.0, {"G": 1.0})
    st_, cmd, history = agc.AgcState(), 0.0, []
    for _ in range(300):
        ace = 50.0 + cmd
        out = agc.agc_dispatch(st_, ace, cfg, {"G": UNLIMITED})
        st_, cmd = out.state, out.commands["G"]
        history.append(cmd)
    assert all(b <= a for a, b in zip(history, history[1:]))
    assert abs(50.0 + cmd) < 0.5


def test_full_battery_shifts_to_generator():
    cfg = agc.AgcConfig(400.0, {"B": 0.9, "G": 0.1})
    limits = {"B": agc.ResourceLimits(0.0, 0.0), "G": agc.ResourceLimits(-200.0, 200.0)}
    # integral after this period: 1150 + 50 * 4 = 1350 MW s, total -45 MW
    out = agc.agc_dispatch(agc.AgcState(ace_integral_mw_s=1150.0), 50.0, cfg, limits)
    assert out.requested["B"] == pytest.approx(-40.5)
    assert out.commands["B"] == 0.0
    assert out.commands["G"] == pytest.approx(-45.0)
    assert out.surplus_mw == pytest.approx(0.0, abs=1e-9)


def test_ramp_limit_respected():
    cfg = agc.AgcConfig(400.0, {"G": 1.0})
    out = agc.agc_dispatch(agc.AgcState(), 3000.0, cfg, {"G": agc.ResourceLimits(-500, 500, 5.0)})
    assert out.commands["G"] == pytest.approx(-5.0)


def test_anti_windup_and_strict():
    cfg = agc.AgcConfig(400.0, {"G": 1.0})
    lim = {"G": agc.ResourceLimits(-10.0, 10.0)}
    st_, cmd = agc.AgcState(), 0.0
    for _ in range(500):
        out = agc.agc_dispatch(st_, 100.0 + cmd, cfg, lim)
        st_, cmd = out.state, out.commands["G"]
    assert out.saturated
    assert abs(st_.ace_integral_mw_s) < 10.0 * 30.0 + 100.0 * 4.0
    with pytest.raises(agc.AllSaturated) as err:
        agc.agc_dispatch(st_, 90.0, cfg, lim, strict=True)
    assert err.value.surplus_mw < 0


def test_agc_never_sees_energy():
    for fn in (agc.compute_ace, agc.agc_dispatch):
        assert not any("soc" in p or "energy" in p for p in inspect.signature(fn).parameters)


def test_config_validation():
    with pytest.raises(ValueError):
        agc.AgcConfig(0.0, {"G": 1.0})
    with pytest.raises(ValueError):
        agc.AgcConfig(400.0, {"G": 0.7})


fractions = st.floats(0.05, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-300, 300), fractions, st.floats(0, 40), st.floats(0, 40), st.floats(0.5, 20))
def test_commands_within_limits(ace, f, lo, hi, ramp):
    cfg = agc.AgcConfig(400.0, {"A": f, "B": 1.0 - f} if f < 1.0 else {"A": 1.0})
    limits = {"A": agc.ResourceLimits(-lo, hi, ramp), "B": agc.ResourceLimits(-hi, lo, ramp)}
    st_ = agc.AgcState()
    prev = {r: 0.0 for r in cfg.participation}
    for _ in range(20):
        out = agc.agc_dispatch(st_, ace, cfg, limits)
        for r, c in out.commands.items():
            assert limits[r].lo_mw - 1e-9 <= c <= limits[r].hi_mw + 1e-9
            assert abs(c - prev[r]) <= ramp + 1e-9
        prev, st_ = out.commands, out.state
