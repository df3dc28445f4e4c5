"""Closed-loop scenario runner.

One tick is one second.  Each tick applies due events, runs AGC or MPC on
their period boundaries, steps the VPPs, records a sample, then advances the
grid dynamics by ``1 / ts_dyn`` forward-Euler substeps with the tick's load
held.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import agc as agc_mod
from . import dynamics as dyn
from . import mpc as mpc_mod
from .grid import GridError, GridModel, PtdfFlow, bundled_network, load_grid, read_yaml
from .pem import DeviceGroup, Fleet
from .vpp import FleetVpp, VppState, battery_headroom, step_bulk_battery

log = logging.getLogger(__name__)

CONTROLLERS = ("droop_only", "agc", "mpc")
EVENT_KINDS = ("load_step", "reference_change")
SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


class GridMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario scripts


@dataclass(frozen=True)
class Event:
    time_s: float
    kind: str
    target: object  # bus id for load_step, resource id for reference_change
    magnitude_mw: float


@dataclass(frozen=True)
class FleetSpec:
    vpp: str
    groups: tuple
    warmup_s: float = 1800.0
    deadband_mw: Optional[float] = None


@dataclass(frozen=True)
class AgcSpec:
    participation: dict  # area -> {resource: fraction}
    bias_mw_per_hz: object = "auto"  # "auto" or {area: value}
    integral_gain_per_s: float = 1.0 / 30.0
    period_s: float = 4.0


@dataclass
class ScenarioScript:
    name: str
    grid_path: Path
    controller: str
    duration_s: float
    seed: int = 0
    events: tuple = ()
    fleet: Optional[FleetSpec] = None
    agc: Optional[AgcSpec] = None
    mpc: mpc_mod.MpcConfig = field(default_factory=mpc_mod.MpcConfig)
    dynamics: dyn.DynConfig = field(default_factory=dyn.DynConfig)
    vpp_overrides: dict = field(default_factory=dict)
    remove_vpps: tuple = ()
    sample_s: float = 1.0
    service_tol_mw: float = 1.0


def _dataclass_from(cls, data, path, allow=None, exclude=()):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    names = {f.name for f in fields(cls)} - set(exclude)
    for k in data:
        if k not in names:
            raise ConfigError(f"{path}.{k}", "unknown field")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _num(data, key, path, default=None, kind=float):
    if key not in data:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing")
        return default
    try:
        return kind(data[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {data[key]!r}") from None


_TOP_KEYS = {"name", "grid", "controller", "duration_s", "seed", "events", "fleet", "agc", "mpc",
             "dynamics", "vpp_overrides", "remove_vpps", "sample_s", "service_tol_mw"}


def parse_scenario(data: dict, base_dir: Path = SCENARIO_DIR) -> ScenarioScript:
    if not isinstance(data, dict):
        raise ConfigError("scenario", "expected a mapping at top level")
    for k in data:
        if k not in _TOP_KEYS:
            raise ConfigError(k, "unknown field")
    grid_ref = str(data.get("grid", "five_bus"))
    gp = Path(grid_ref)
    if not gp.suffix:
        gp = bundled_network(grid_ref)
    elif not gp.is_absolute():
        gp = base_dir / gp
    controller = str(data.get("controller", ""))
    if controller not in CONTROLLERS:
        raise ConfigError("controller", f"expected one of {CONTROLLERS}, got {controller!r}")
    duration = _num(data, "duration_s", "scenario")
    if duration <= 0:
        raise ConfigError("duration_s", "must be positive")

    events = []
    raw_events = data.get("events") or []
    if not isinstance(raw_events, list):
        raise ConfigError("events", "expected a list")
    for k, ev in enumerate(raw_events):
        p = f"events[{k}]"
        if not isinstance(ev, dict):
            raise ConfigError(p, "expected a mapping")
        kind = ev.get("kind")
        if kind not in EVENT_KINDS:
            raise ConfigError(f"{p}.kind", f"expected one of {EVENT_KINDS}, got {kind!r}")
        tkey = "bus" if kind == "load_step" else "resource"
        if tkey not in ev:
            raise ConfigError(f"{p}.{tkey}", "missing")
        target = int(ev[tkey]) if kind == "load_step" else str(ev[tkey])
        events.append(Event(_num(ev, "time_s", p), kind, target, _num(ev, "magnitude_mw", p)))
    for k in range(1, len(events)):
        if events[k].time_s < events[k - 1].time_s:
            raise ConfigError(f"events[{k}].time_s", "events must be time-ordered")

    fleet = None
    if data.get("fleet"):
        fd = dict(data["fleet"])
        groups_raw = fd.pop("groups", None)
        if "population" in fd:
            pop_path = base_dir / str(fd.pop("population"))
            if not pop_path.exists() and (SCENARIO_DIR / pop_path.name).exists():
                pop_path = SCENARIO_DIR / pop_path.name  # bundled population
            try:
                with open(pop_path) as fh:
                    groups_raw = read_yaml(fh)["groups"]
            except (OSError, KeyError, TypeError) as exc:
                raise ConfigError("fleet.population", f"cannot read {pop_path}: {exc}") from exc
        if not groups_raw:
            raise ConfigError("fleet.groups", "fleet needs at least one device group")
        groups = tuple(_dataclass_from(DeviceGroup, g, f"fleet.groups[{k}]")
                       for k, g in enumerate(groups_raw))
        for k, g in enumerate(groups):
            if g.kind not in ("tcl", "ess") or g.count <= 0:
                raise ConfigError(f"fleet.groups[{k}]", "kind must be tcl|ess and count positive")
        fd["groups"] = groups
        fleet = _dataclass_from(FleetSpec, fd, "fleet")

    agc = None
    if data.get("agc"):
        ad = dict(data["agc"])
        part = ad.get("participation")
        if not isinstance(part, dict):
            raise ConfigError("agc.participation", "expected a mapping area -> {resource: fraction}")
        ad["participation"] = {int(a): {str(r): float(f) for r, f in m.items()} for a, m in part.items()}
        agc = _dataclass_from(AgcSpec, ad, "agc")
    if controller == "agc" and agc is None:
        raise ConfigError("agc", "controller 'agc' needs an agc section")

    mpc_cfg = _dataclass_from(mpc_mod.MpcConfig, data.get("mpc") or {}, "mpc")
    dyn_cfg = _dataclass_from(dyn.DynConfig, data.get("dynamics") or {}, "dynamics")
    overrides = data.get("vpp_overrides") or {}
    if not isinstance(overrides, dict):
        raise ConfigError("vpp_overrides", "expected a mapping")

    return ScenarioScript(
        name=str(data.get("name", "scenario")), grid_path=gp, controller=controller,
        duration_s=duration, seed=_num(data, "seed", "scenario", 0, int), events=tuple(events),
        fleet=fleet, agc=agc, mpc=mpc_cfg, dynamics=dyn_cfg, vpp_overrides=dict(overrides),
        remove_vpps=tuple(data.get("remove_vpps") or ()),
        sample_s=_num(data, "sample_s", "scenario", 1.0),
        service_tol_mw=_num(data, "service_tol_mw", "scenario", 1.0))


def load_scenario(path) -> ScenarioScript:
    path = Path(path)
    if not path.exists() and not path.suffix:
        path = bundled_scenario(str(path))
    try:
        with open(path) as fh:
            data = read_yaml(fh)
    except OSError as exc:
        raise ConfigError(str(path), str(exc)) from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
    return parse_scenario(data, path.parent)


def bundled_scenario(name: str) -> Path:
    p = SCENARIO_DIR / f"{name}.yaml"
    if not p.exists():
        raise ConfigError("scenario", f"no bundled scenario {name!r}")
    return p


def list_scenarios() -> list:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.yaml") if not p.stem.endswith("population"))


def scenario_grid(script: ScenarioScript) -> GridModel:
    """The scenario's grid with overrides applied (fleet bounds not yet)."""
    try:
        grid = load_grid(script.grid_path)
    except OSError as exc:
        raise ConfigError("grid", str(exc)) from exc
    except GridError as exc:
        raise ConfigError("grid", str(exc)) from exc
    ids = {v.id for v in grid.vpps}
    for vid in script.remove_vpps:
        if vid not in ids:
            raise ConfigError("remove_vpps", f"unknown vpp {vid!r}")
    if script.remove_vpps:
        grid = GridModel(grid.buses, grid.lines, grid.generators,
                         tuple(v for v in grid.vpps if v.id not in script.remove_vpps),
                         grid.base_mva, grid.slack_bus, grid.name)
    for vid, over in script.vpp_overrides.items():
        if vid not in ids or vid in script.remove_vpps:
            raise ConfigError(f"vpp_overrides.{vid}", "unknown vpp")
        try:
            grid = grid.replace_vpp(replace(grid.vpp(vid), **over))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"vpp_overrides.{vid}", str(exc)) from exc
    return grid


def validate_scenario(script: ScenarioScript) -> GridModel:
    grid = scenario_grid(script)
    bus_ids = {b.id for b in grid.buses}
    resources = {g.id for g in grid.generators} | {v.id for v in grid.vpps}
    for k, ev in enumerate(script.events):
        if ev.kind == "load_step" and ev.target not in bus_ids:
            raise ConfigError(f"events[{k}].bus", f"unknown bus {ev.target}")
        if ev.kind == "reference_change" and ev.target not in resources:
            raise ConfigError(f"events[{k}].resource", f"unknown resource {ev.target!r}")
        if ev.time_s < 0 or ev.time_s >= script.duration_s:
            raise ConfigError(f"events[{k}].time_s", "outside the run")
    fleets = [v for v in grid.vpps if v.kind == "pem_fleet"]
    if fleets and script.fleet is None:
        raise ConfigError("fleet", f"grid has pem_fleet {fleets[0].id!r} but no fleet population")
    if script.fleet is not None and script.fleet.vpp not in {v.id for v in fleets}:
        raise ConfigError("fleet.vpp", f"{script.fleet.vpp!r} is not a pem_fleet VPP")
    if script.agc is not None:
        for a, part in script.agc.participation.items():
            if a not in grid.areas:
                raise ConfigError(f"agc.participation.{a}", "unknown area")
            for r in part:
                if r not in resources:
                    raise ConfigError(f"agc.participation.{a}.{r}", "unknown resource")
            if abs(sum(part.values()) - 1.0) > 1e-9:
                raise ConfigError(f"agc.participation.{a}", "fractions must sum to 1")
    if script.controller == "mpc" and script.mpc.ts_s % 1.0:
        raise ConfigError("mpc.ts_s", "must be a whole number of seconds")
    if script.agc is not None and script.agc.period_s % 1.0:
        raise ConfigError("agc.period_s", "must be a whole number of seconds")
    if abs(round(1.0 / script.dynamics.ts_dyn_s) * script.dynamics.ts_dyn_s - 1.0) > 1e-9:
        raise ConfigError("dynamics.ts_dyn_s", "must divide one second")
    if script.sample_s != 1.0:
        raise ConfigError("sample_s", "only a 1 s output period is supported")
    return grid


# ---------------------------------------------------------------------------
# traces


@dataclass
class SimTrace:
    columns: list
    data: np.ndarray  # (samples, columns)
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    @property
    def t_s(self) -> np.ndarray:
        return self.column("t_s")

    def __len__(self) -> int:
        return self.data.shape[0]

    def vpp_names(self) -> list:
        return self.meta.get("vpps", [])

    def vpp_column(self, vpp_id: str, what: str) -> np.ndarray:
        j = self.vpp_names().index(vpp_id) + 1
        return self.column(f"vpp{j}_{what}")

    def gen_column(self, gen_id: str) -> np.ndarray:
        j = self.meta["generators"].index(gen_id) + 1
        return self.column(f"gen{j}_mw")

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns) + "\n")
        fmts = ["{:.1f}" if c == "t_s" else "{:.9f}" if c == "freq_hz" else "{:.6f}"
                for c in self.columns]
        for row in self.data:
            buf.write(",".join(f.format(v) for f, v in zip(fmts, row)) + "\n")
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    @classmethod
    def from_csv(cls, path) -> "SimTrace":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        n_v = sum(1 for c in header if c.endswith("_soc_pct"))
        n_g = sum(1 for c in header if c.startswith("gen"))
        meta = {"vpps": [f"vpp{j + 1}" for j in range(n_v)],
                "generators": [f"gen{j + 1}" for j in range(n_g)]}
        return cls(header, data, meta)


# ---------------------------------------------------------------------------
# simulation


class Simulation:
    def __init__(self, script: ScenarioScript, seed: Optional[int] = None, debug_dir=None,
                 event_log: bool = False):
        self.script = script
        self.seed = script.seed if seed is None else int(seed)
        grid = validate_scenario(script)
        self.dyn_cfg = script.dynamics
        f0 = self.dyn_cfg.nominal_hz

        # fleet first: its population sets the energy bounds of the fleet VPP
        self.fleet_vpp = None
        if script.fleet is not None:
            fs = script.fleet
            fleet = Fleet.from_groups(fs.groups, self.seed, track_events=False)
            self.fleet_vpp = FleetVpp(fleet, fs.vpp, fs.deadband_mw)
            for _ in range(int(round(fs.warmup_s))):
                self.fleet_vpp.step(0.0, 1.0)
            fleet.track_events = event_log
            fleet.t_s = 0.0
            fleet.x_lo_seen[:] = fleet.x
            fleet.x_hi_seen[:] = fleet.x
            asset = grid.vpp(fs.vpp)
            grid = grid.replace_vpp(replace(asset, s_min_mwh=0.0, s_max_mwh=fleet.capacity_mwh(),
                                            s0_mwh=fleet.energy_mwh(), eta_ch=1.0, eta_dis=1.0))
        self.grid = grid

        # schedule: net bus loads, with the residual on the slack-bus machine
        self.base_net_load = np.array([b.net_load_mw for b in grid.buses])
        sched = {g.id: (g.p_sched_mw if g.p_sched_mw is not None else 0.0) for g in grid.generators}
        residual = float(self.base_net_load.sum()) - sum(sched.values())
        slack_gens = [g for g in grid.generators if g.bus == grid.slack_bus]
        if abs(residual) > 1e-9:
            if not slack_gens:
                raise ConfigError("grid", "schedule does not balance and no machine at the slack bus")
            sched[slack_gens[0].id] += residual
        for g in grid.generators:
            if not g.p_min_mw - 1e-9 <= sched[g.id] <= g.p_max_mw + 1e-9:
                raise ConfigError(f"generators.{g.id}", f"schedule {sched[g.id]:.3f} MW outside limits")
        self.schedule = sched
        self.areas = grid.areas
        self.bus_area = np.array([b.area for b in grid.buses])
        area_load = {a: float(self.base_net_load[self.bus_area == a].sum()) for a in self.areas}
        self.params = dyn.build_area_params(grid, sched, area_load, self.dyn_cfg)
        self.states = dyn.initial_states(self.params, sched, self.dyn_cfg)
        self.gen_order = [m.id for ap in self.params for m in ap.machines]
        self.gen_area = {m.id: k for k, ap in enumerate(self.params) for m in ap.machines}

        # damping is spread over an area's buses in proportion to their load
        w = np.abs(np.array([b.load_mw for b in grid.buses]))
        self.damp_share = np.zeros((len(self.areas), grid.n_bus))
        for k, a in enumerate(self.areas):
            mask = self.bus_area == a
            tot = w[mask].sum()
            self.damp_share[k, mask] = w[mask] / tot if tot > 0 else 1.0 / mask.sum()
        self.ptdf = PtdfFlow(grid)

        # resources
        self.battery_ids = [v.id for v in grid.vpps if v.kind == "bulk_battery"]
        self.vpp_states = {v.id: VppState(v.id, 0.0, 0.0, v.s0_mwh) for v in grid.vpps
                           if v.kind == "bulk_battery"}
        self.vpp_base_ref = {v.id: 0.0 for v in grid.vpps}
        self.vpp_ref = {v.id: 0.0 for v in grid.vpps}  # applied to the plant
        self.vpp_ref_requested = {v.id: 0.0 for v in grid.vpps}  # logged
        self.gen_offset = {g.id: 0.0 for g in grid.generators}
        self.gen_cmd = {g.id: 0.0 for g in grid.generators}

        # controllers
        self.agc_cfgs, self.agc_states = {}, {}
        bias = {}
        for k, ap in enumerate(self.params):
            auto = (sum(m.droop_gain_mw_per_pu for m in ap.machines) + ap.damping_mw_per_pu) / f0
            bias[self.areas[k]] = auto
        if script.agc is not None:
            if isinstance(script.agc.bias_mw_per_hz, dict):
                bias.update({int(a): float(v) for a, v in script.agc.bias_mw_per_hz.items()})
            elif script.agc.bias_mw_per_hz != "auto":
                raise ConfigError("agc.bias_mw_per_hz", "expected 'auto' or a per-area mapping")
            if script.controller == "agc":
                for a, part in script.agc.participation.items():
                    self.agc_cfgs[a] = agc_mod.AgcConfig(bias[a], part,
                                                         script.agc.integral_gain_per_s,
                                                         script.agc.period_s)
                    self.agc_states[a] = agc_mod.AgcState(0.0, {r: 0.0 for r in part})
        self.bias = bias
        self.mpc = None
        if script.controller == "mpc":
            self.mpc = mpc_mod.MpcController(grid, script.mpc, dump_dir=debug_dir)
        self.mpc_log = []
        self.agc_log = []

        self.net_load = self.base_net_load.copy()
        self.t = 0.0

    # helpers --------------------------------------------------------------
    def vpp_power(self, vid: str) -> float:
        if self.fleet_vpp is not None and vid == self.fleet_vpp.state.asset_id:
            return self.fleet_vpp.state.p_actual_mw
        return self.vpp_states[vid].p_actual_mw

    def vpp_energy(self, vid: str) -> float:
        if self.fleet_vpp is not None and vid == self.fleet_vpp.state.asset_id:
            return self.fleet_vpp.state.soc_mwh
        return self.vpp_states[vid].soc_mwh

    def area_net_load(self) -> list:
        """Electrical demand per area: bus net load plus VPP charging."""
        per_bus = self.net_load.copy()
        for v in self.grid.vpps:
            per_bus[self.grid.bus_index(v.bus)] += self.vpp_power(v.id)
        return [float(per_bus[self.bus_area == a].sum()) for a in self.areas], per_bus

    def freq_dev_hz(self, k: int) -> float:
        return self.states[k].delta_omega_pu * self.dyn_cfg.nominal_hz

    def ace(self, k: int) -> float:
        a = self.areas[k]
        return self.states[k].tie_flow_dev_mw + self.bias[a] * self.freq_dev_hz(k)

    def mean_freq_hz(self) -> float:
        freqs, weights = [], []
        for s, ap in zip(self.states, self.params):
            for m in ap.machines:
                freqs.append(s.freq_hz)
                weights.append(m.kinetic_mws)
        return dyn.mean_frequency(freqs, weights)

    def machine(self, gid: str):
        k = self.gen_area[gid]
        ap = self.params[k]
        i = [m.id for m in ap.machines].index(gid)
        return self.states[k].machines[i]

    def set_gen_ref(self, gid: str, p_ref: float) -> None:
        self.machine(gid).p_ref_mw = p_ref

    # control ----------------------------------------------------------------
    def _resource_limits(self, rid: str, period: float) -> agc_mod.ResourceLimits:
        grid = self.grid
        if rid in self.schedule:
            g = grid.generator(rid)
            base = self.schedule[rid] + self.gen_offset[rid]
            return agc_mod.ResourceLimits(g.p_min_mw - base, g.p_max_mw - base,
                                          g.ramp_mw_per_min * period / 60.0)
        v = grid.vpp(rid)
        ramp = min(v.ramp_ch_mw_per_min, v.ramp_dis_mw_per_min) * period / 60.0
        base = self.vpp_base_ref[rid]
        if v.kind == "bulk_battery":
            ch, dis = battery_headroom(self.vpp_states[rid], v)
        else:
            ch, dis = v.p_ch_max_mw, v.p_dis_max_mw
        # injection convention: -charging
        return agc_mod.ResourceLimits(-(ch - base), dis + base, ramp)

    def run_agc(self) -> None:
        for k, a in enumerate(self.areas):
            if a not in self.agc_cfgs:
                continue
            cfg = self.agc_cfgs[a]
            ace = self.ace(k)
            limits = {r: self._resource_limits(r, cfg.agc_period_s) for r in cfg.participation}
            out = agc_mod.agc_dispatch(self.agc_states[a], ace, cfg, limits)
            self.agc_states[a] = out.state
            self.agc_log.append((self.t, a, ace, out.surplus_mw, out.saturated))
            for r, cmd in out.commands.items():
                if r in self.schedule:
                    self.gen_cmd[r] = cmd
                else:
                    self.vpp_ref[r] = self.vpp_base_ref[r] - cmd
                    self.vpp_ref_requested[r] = self.vpp_base_ref[r] - out.requested[r]
        for gid in self.schedule:
            self.set_gen_ref(gid, self.schedule[gid] + self.gen_offset[gid] + self.gen_cmd[gid])

    def run_mpc(self) -> None:
        grid = self.grid
        measured = mpc_mod.MeasuredState(
            self.t, {g.id: self.machine(g.id).p_mech_mw for g in grid.generators},
            {v.id: self.vpp_power(v.id) for v in grid.vpps},
            {v.id: self.vpp_energy(v.id) for v in grid.vpps})
        refs = np.array([self.schedule[g.id] + self.gen_offset[g.id] for g in grid.generators])
        step = self.mpc.step(measured, refs, self.net_load.copy())
        self.mpc_log.append((self.t, step))
        for g in grid.generators:
            self.set_gen_ref(g.id, step.commands[g.id])
        for v in grid.vpps:
            self.vpp_ref[v.id] = self.vpp_base_ref[v.id] + step.commands[v.id]
            self.vpp_ref_requested[v.id] = self.vpp_ref[v.id]

    def apply_event(self, ev: Event) -> None:
        if ev.kind == "load_step":
            self.net_load[self.grid.bus_index(ev.target)] += ev.magnitude_mw
        elif ev.target in self.schedule:
            self.gen_offset[ev.target] += ev.magnitude_mw
            if self.script.controller != "mpc":
                self.set_gen_ref(ev.target, self.schedule[ev.target] + self.gen_offset[ev.target]
                                 + self.gen_cmd[ev.target])
        else:
            self.vpp_base_ref[ev.target] += ev.magnitude_mw
            self.vpp_ref[ev.target] += ev.magnitude_mw
            self.vpp_ref_requested[ev.target] += ev.magnitude_mw

    # main loop --------------------------------------------------------------
    def columns(self) -> list:
        cols = ["t_s", "freq_hz", "ace_mw"]
        cols += [f"gen{i + 1}_mw" for i in range(len(self.grid.generators))]
        for j in range(len(self.grid.vpps)):
            cols += [f"vpp{j + 1}_mw", f"vpp{j + 1}_ref_mw", f"vpp{j + 1}_soc_pct"]
        cols += [f"line{k + 1}_mw" for k in range(len(self.grid.lines))]
        return cols + ["load_mw", "swing_mw"]

    def sample(self) -> list:
        grid = self.grid
        area_load, per_bus = self.area_net_load()
        row = [self.t, self.mean_freq_hz(), self.ace(0)]
        row += [self.machine(g.id).p_mech_mw for g in grid.generators]
        for v in grid.vpps:
            e = self.vpp_energy(v.id)
            row += [self.vpp_power(v.id), self.vpp_ref_requested[v.id],
                    100.0 * (e - v.s_min_mwh) / (v.s_max_mwh - v.s_min_mwh)]
        # network injections: electrical machine output minus demand and damping
        inj = -per_bus.copy()
        elec = dyn.machine_electrical_outputs(self.states, area_load, self.params)
        for gid, p in zip(self.gen_order, elec):
            inj[grid.bus_index(grid.generator(gid).bus)] += p
        for k, (s, ap) in enumerate(zip(self.states, self.params)):
            inj -= self.damp_share[k] * ap.damping_mw_per_pu * s.delta_omega_pu
        row += list(self.ptdf.flows(inj))
        acc = dyn.accelerating_power(self.states, area_load, self.params)
        swing = sum(acc[k] + ap.damping_mw_per_pu * s.delta_omega_pu
                    for k, (s, ap) in enumerate(zip(self.states, self.params)))
        row += [float(self.net_load.sum()), swing]
        return row

    def run(self) -> SimTrace:
        s = self.script
        n = int(round(s.duration_s))
        sub = int(round(1.0 / self.dyn_cfg.ts_dyn_s))
        rows = []
        events = list(s.events)
        ei = 0
        agc_every = int(round(s.agc.period_s)) if s.agc is not None else 0
        mpc_every = int(round(s.mpc.ts_s))
        for k in range(n):
            self.t = float(k)
            while ei < len(events) and events[ei].time_s <= self.t + 1e-9:
                self.apply_event(events[ei])
                ei += 1
            if s.controller == "agc" and k % agc_every == 0:
                self.run_agc()
            elif s.controller == "mpc" and k % mpc_every == 0:
                self.run_mpc()
            for vid in self.battery_ids:
                self.vpp_states[vid] = step_bulk_battery(self.vpp_states[vid], self.vpp_ref[vid],
                                                         1.0, self.grid.vpp(vid))
            if self.fleet_vpp is not None:
                self.fleet_vpp.step(self.vpp_ref[self.fleet_vpp.state.asset_id], 1.0)
            rows.append(self.sample())
            area_load, _ = self.area_net_load()
            try:
                for _ in range(sub):
                    self.states = dyn.step_dynamics(self.states, area_load, self.dyn_cfg, self.params)
            except dyn.UnstableStep as exc:
                raise dyn.UnstableStep(f"t={self.t:.0f} s: {exc}") from exc
        data = np.array(rows, dtype=float)
        if not np.all(np.isfinite(data)):
            raise dyn.UnstableStep("non-finite value in trace")
        meta = {"scenario": s.name, "seed": self.seed, "controller": s.controller,
                "generators": [g.id for g in self.grid.generators],
                "vpps": [v.id for v in self.grid.vpps],
                "lines": [ln.id for ln in self.grid.lines],
                "service_tol_mw": s.service_tol_mw}
        return SimTrace(self.columns(), data, meta)


def run_scenario(script, seed: Optional[int] = None, debug_dir=None,
                 event_log=None) -> SimTrace:
    """Run a scenario (script object, path, or bundled name)."""
    if not isinstance(script, ScenarioScript):
        script = load_scenario(script)
    sim = Simulation(script, seed=seed, debug_dir=debug_dir, event_log=event_log is not None)
    trace = sim.run()
    if event_log is not None and sim.fleet_vpp is not None:
        sim.fleet_vpp.fleet.write_event_log(event_log)
    return trace


# ---------------------------------------------------------------------------
# comparison and export


def saturation_time(trace: SimTrace, j: int) -> Optional[float]:
    """First sample with SOC >= 99.5 % and |p| < 0.1 MW (None if never)."""
    soc = trace.column(f"vpp{j}_soc_pct")
    p = trace.column(f"vpp{j}_mw")
    hit = np.flatnonzero((soc >= 99.5) & (np.abs(p) < 0.1))
    return float(trace.t_s[hit[0]]) if hit.size else None


def service_duration(trace: SimTrace, j: int, tol_mw: float = 1.0) -> float:
    """Time of the last sample at which the VPP tracked its reference."""
    err = np.abs(trace.column(f"vpp{j}_mw") - trace.column(f"vpp{j}_ref_mw"))
    ok = np.flatnonzero(err <= tol_mw)
    return float(trace.t_s[ok[-1]]) if ok.size else 0.0


def trace_metrics(trace: SimTrace, tol_mw: float = 1.0) -> dict:
    f = trace.column("freq_hz")
    f0 = 60.0
    out = {"peak_abs_df_hz": float(np.max(np.abs(f - f0))),
           "ace_rms_mw": float(np.sqrt(np.mean(trace.column("ace_mw") ** 2)))}
    n_v = sum(1 for c in trace.columns if c.endswith("_soc_pct"))
    for j in range(1, n_v + 1):
        out[f"vpp{j}_saturation_s"] = saturation_time(trace, j)
        out[f"vpp{j}_service_s"] = service_duration(trace, j, tol_mw)
    return out


def compare_runs(trace_a: SimTrace, trace_b: SimTrace, tol_mw: float = 1.0) -> dict:
    """Metric-by-metric report: {name: (a, b, b - a)}."""
    if len(trace_a) != len(trace_b) or not np.array_equal(trace_a.t_s, trace_b.t_s):
        raise GridMismatch("traces do not share a sample grid")
    ma, mb = trace_metrics(trace_a, tol_mw), trace_metrics(trace_b, tol_mw)
    report = {}
    for k in ma:
        a, b = ma[k], mb.get(k)
        delta = None if a is None or b is None else b - a
        report[k] = (a, b, delta)
    return report


def export(trace: SimTrace, csv_path, svg_path=None) -> list:
    written = []
    try:
        trace.to_csv(csv_path)
        written.append(Path(csv_path))
        if svg_path is not None:
            plot_trace(trace, svg_path)
            written.append(Path(svg_path))
    except OSError as exc:
        raise IOError(f"export failed: {exc}") from exc
    return written


def plot_trace(trace: SimTrace, path) -> None:
    """Four stacked panels: VPP power, battery power and SOC, machines, frequency."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "pemgrid"

    t = trace.t_s / 60.0
    names = trace.vpp_names()
    fig, ax = plt.subplots(4, 1, figsize=(7, 9), sharex=True)
    fleet_j = [j + 1 for j in range(len(names)) if j + 1 != 1] or [1]
    for j in fleet_j:
        ax[0].plot(t, trace.column(f"vpp{j}_mw"), label=f"{names[j - 1]} actual")
        ax[0].plot(t, trace.column(f"vpp{j}_ref_mw"), "--", label=f"{names[j - 1]} ref")
    ax[0].set_ylabel("VPP (MW)")
    ax[0].legend(fontsize=7)
    if names:
        ax[1].plot(t, trace.column("vpp1_mw"), label="power")
        ax[1].plot(t, trace.column("vpp1_ref_mw"), "--", label="ref")
        ax[1].set_ylabel(f"{names[0]} (MW)")
        twin = ax[1].twinx()
        twin.plot(t, trace.column("vpp1_soc_pct"), color="k", lw=0.8)
        twin.set_ylabel("SOC (%)")
        ax[1].legend(fontsize=7)
    for i, gid in enumerate(trace.meta.get("generators", [])):
        ax[2].plot(t, trace.column(f"gen{i + 1}_mw") - trace.column(f"gen{i + 1}_mw")[0], label=gid)
    ax[2].set_ylabel("machine change (MW)")
    ax[2].legend(fontsize=7)
    ax[3].plot(t, trace.column("freq_hz"))
    ax[3].set_ylabel("frequency (Hz)")
    ax[3].set_xlabel("time (min)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
