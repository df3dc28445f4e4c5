"""Two-area load-frequency dynamics with governor droop.

Machines inside an area swing coherently, so each area carries one speed
deviation.  Per machine i in area a, integrated with forward Euler::

    M_a  dw_a/dt      = sum(P_mech) - P_load_a - D_a w_a - (E_a + dP_tie_a)
    T_g  dP_valve/dt  = P_ref - (S_i / R_i) w_a - P_valve
    T_t  dP_mech/dt   = P_valve - P_mech
         dP_tie_1/dt  = T_12 * 2 pi f0 * (w_1 - w_2)

with ``M_a = sum 2 H_i S_i`` (MW s / pu), ``E_a`` the scheduled export and
``P_load_a`` the net electrical demand (load minus renewables plus VPP
charging).  Speeds are per-unit, powers MW.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .grid import GridModel


class UnstableStep(ArithmeticError):
    """A state became non-finite."""


@dataclass(frozen=True)
class DynConfig:
    ts_dyn_s: float = 0.1
    governor_tc_s: float = 0.6
    turbine_tc_s: float = 0.6
    damping_d_pu: float = 1.0
    tie_stiffness_mw_per_rad: float = 5.0
    nominal_hz: float = 60.0

    def __post_init__(self):
        if self.ts_dyn_s <= 0:
            raise ValueError("ts_dyn_s must be positive")
        if self.governor_tc_s <= 0 or self.turbine_tc_s <= 0:
            raise ValueError("time constants must be positive")
        if self.ts_dyn_s >= min(self.governor_tc_s, self.turbine_tc_s) / 5:
            raise ValueError("ts_dyn_s must be below min(governor_tc_s, turbine_tc_s)/5")
        if self.damping_d_pu < 0 or self.tie_stiffness_mw_per_rad < 0:
            raise ValueError("damping and tie stiffness must be non-negative")


@dataclass(frozen=True)
class MachineParams:
    id: str
    rating_mva: float
    droop_pu: float
    inertia_h_s: float
    p_min_mw: float
    p_max_mw: float
    ramp_mw_per_s: float

    @property
    def droop_gain_mw_per_pu(self) -> float:
        return self.rating_mva / self.droop_pu

    @property
    def kinetic_mws(self) -> float:
        return 2.0 * self.inertia_h_s * self.rating_mva


@dataclass(frozen=True)
class AreaParams:
    machines: tuple
    damping_mw_per_pu: float
    export_sched_mw: float

    @property
    def inertia_mws(self) -> float:
        return sum(m.kinetic_mws for m in self.machines)


@dataclass
class MachineDynState:
    delta_omega_pu: float
    p_mech_mw: float
    p_valve_mw: float
    p_ref_mw: float


@dataclass
class AreaDynState:
    machines: list
    tie_flow_dev_mw: float = 0.0
    delta_omega_pu: float = 0.0
    nominal_hz: float = 60.0

    @property
    def freq_hz(self) -> float:
        return self.nominal_hz * (1.0 + self.delta_omega_pu)

    @property
    def p_mech_total_mw(self) -> float:
        return sum(m.p_mech_mw for m in self.machines)

    def copy(self) -> "AreaDynState":
        return AreaDynState([replace(m) for m in self.machines], self.tie_flow_dev_mw,
                            self.delta_omega_pu, self.nominal_hz)


def build_area_params(grid: GridModel, schedule: dict, net_load_by_area: dict,
                      config: DynConfig) -> tuple:
    """Area parameters for a two-area grid.

    ``schedule`` maps generator id to MW; ``net_load_by_area`` is the scheduled
    electrical demand per area, which also sets the damping base.
    """
    areas = grid.areas
    if len(areas) != 2:
        raise ValueError(f"two-area model needs exactly 2 areas, grid has {areas}")
    out = []
    for a in areas:
        machines = tuple(
            MachineParams(g.id, g.rating_mva, g.droop_pct, g.inertia_h_s,
                          g.p_min_mw, g.p_max_mw, g.ramp_mw_per_min / 60.0)
            for g in grid.generators if grid.area_of_bus(g.bus) == a)
        if not machines:
            raise ValueError(f"area {a} has no machines")
        gen = sum(schedule[m.id] for m in machines)
        load = net_load_by_area[a]
        out.append(AreaParams(machines, config.damping_d_pu * abs(load), gen - load))
    e1, e2 = out[0].export_sched_mw, out[1].export_sched_mw
    if abs(e1 + e2) > 1e-6:
        raise ValueError(f"scheduled exports do not balance: {e1:.6g} vs {e2:.6g} MW")
    return tuple(out)


def initial_states(params: Sequence[AreaParams], schedule: dict,
                   config: DynConfig) -> tuple:
    return tuple(
        AreaDynState([MachineDynState(0.0, schedule[m.id], schedule[m.id], schedule[m.id])
                      for m in ap.machines], 0.0, 0.0, config.nominal_hz)
        for ap in params)


def accelerating_power(states, net_load_mw, params) -> tuple:
    """Per-area power absorbed by the rotating masses (MW)."""
    return tuple(
        s.p_mech_total_mw - net_load_mw[k] - ap.damping_mw_per_pu * s.delta_omega_pu
        - (ap.export_sched_mw + s.tie_flow_dev_mw)
        for k, (s, ap) in enumerate(zip(states, params)))


def step_dynamics(states, net_load_mw, config: DynConfig, params) -> tuple:
    """Advance both areas by one forward-Euler step of ``config.ts_dyn_s``."""
    dt = config.ts_dyn_s
    acc = accelerating_power(states, net_load_mw, params)
    w = [s.delta_omega_pu for s in states]
    tie_rate = config.tie_stiffness_mw_per_rad * 2.0 * math.pi * config.nominal_hz * (w[0] - w[1])
    tie1 = states[0].tie_flow_dev_mw + dt * tie_rate

    out = []
    for k, (s, ap) in enumerate(zip(states, params)):
        w_new = w[k] + dt * acc[k] / ap.inertia_mws
        machines = []
        for m, mp in zip(s.machines, ap.machines):
            valve = m.p_valve_mw + dt * (m.p_ref_mw - mp.droop_gain_mw_per_pu * w[k]
                                         - m.p_valve_mw) / config.governor_tc_s
            valve = min(max(valve, mp.p_min_mw), mp.p_max_mw)
            dmech = dt * (m.p_valve_mw - m.p_mech_mw) / config.turbine_tc_s
            lim = mp.ramp_mw_per_s * dt
            dmech = min(max(dmech, -lim), lim)
            mech = min(max(m.p_mech_mw + dmech, mp.p_min_mw), mp.p_max_mw)
            machines.append(MachineDynState(w_new, mech, valve, m.p_ref_mw))
        tie = tie1 if k == 0 else -tie1
        out.append(AreaDynState(machines, tie, w_new, s.nominal_hz))

    for s in out:
        vals = [s.delta_omega_pu, s.tie_flow_dev_mw]
        for m in s.machines:
            vals += [m.p_mech_mw, m.p_valve_mw]
        if not all(math.isfinite(v) for v in vals):
            raise UnstableStep("non-finite state after dynamics step")
    return tuple(out)


def machine_electrical_outputs(states, net_load_mw, params) -> list:
    """Electrical output of each machine (MW), areas concatenated.

    The area's accelerating power is shared among its machines in proportion
    to stored kinetic energy; the remainder is what flows into the network.
    """
    acc = accelerating_power(states, net_load_mw, params)
    out = []
    for k, (s, ap) in enumerate(zip(states, params)):
        total = ap.inertia_mws
        for m, mp in zip(s.machines, ap.machines):
            out.append(m.p_mech_mw - acc[k] * mp.kinetic_mws / total)
    return out


def mean_frequency(freqs_hz: Sequence[float], inertias: Sequence[float]) -> float:
    """Inertia-weighted mean of machine frequencies."""
    f = np.asarray(freqs_hz, dtype=float)
    h = np.asarray(inertias, dtype=float)
    if f.size == 0:
        raise ValueError("need at least one machine")
    return float(np.dot(f, h) / h.sum())


def composite_stiffness_mw_per_pu(params) -> float:
    """Sum of droop gains and load damping over both areas."""
    return sum(ap.damping_mw_per_pu + sum(m.droop_gain_mw_per_pu for m in ap.machines)
               for ap in params)
