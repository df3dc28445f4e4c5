"""Packetized energy management (PEM) device fleets.

Each device is OFF, CHARGE, DISCHARGE or OPT_OUT.  An OFF device asks for
charge (or, for storage, discharge) packets at a state-dependent rate; an
accepted packet runs for its full length and the device drops back to OFF.
A device whose state leaves [x_min, x_max] opts out and serves itself until it
is back past its setpoint.

Devices never request a packet that would carry them out of band, which is
what lets packets always run to completion.

Two code paths exist: :func:`step_device` works on one device and is the
reference; :class:`Fleet` is the vectorized form used in simulation.  Both use
the same per-device random streams, so they agree step for step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

REQUEST_SCHEMA_VERSION = 1

_TIMER_EPS = 1e-9


class Mode(IntEnum):
    OFF = 0
    CHARGE = 1
    DISCHARGE = 2
    OPT_OUT = 3


class InvalidGrant(ValueError):
    def __init__(self, device_id, msg="grant for a device with no pending request"):
        super().__init__(f"device {device_id}: {msg}")
        self.device_id = device_id


@dataclass(frozen=True)
class PemDeviceConfig:
    kind: str  # "tcl" | "ess"
    rated_power_kw: float
    packet_len_charge_s: float
    packet_len_discharge_s: float
    x_min: float
    x_max: float
    setpoint: float
    request_rate_max_per_s: float
    # TCL (water heater) thermal model
    capacitance_kwh_per_c: float = 0.0
    resistance_c_per_kw: float = 0.0
    ambient_c: float = 20.0
    eta: float = 1.0
    # ESS
    eta_ch: float = 1.0
    eta_dis: float = 1.0

    def __post_init__(self):
        if self.kind not in ("tcl", "ess"):
            raise ValueError(f"unknown device kind {self.kind!r}")
        if not self.x_min < self.setpoint < self.x_max:
            raise ValueError("need x_min < setpoint < x_max")
        if self.packet_len_charge_s <= 0 or self.packet_len_discharge_s <= 0:
            raise ValueError("packet lengths must be positive")
        if self.request_rate_max_per_s <= 0 or self.rated_power_kw <= 0:
            raise ValueError("request rate and rated power must be positive")
        if self.kind == "tcl" and (self.capacitance_kwh_per_c <= 0 or self.resistance_c_per_kw <= 0):
            raise ValueError("TCL needs positive capacitance and resistance")

    @property
    def can_discharge(self) -> bool:
        return self.kind == "ess"

    def charge_packet_rise(self) -> float:
        """State change of one charge packet, thermal losses ignored."""
        e = self.rated_power_kw * self.packet_len_charge_s / 3600.0
        if self.kind == "tcl":
            return self.eta * e / self.capacitance_kwh_per_c
        return self.eta_ch * e

    def discharge_packet_drop(self) -> float:
        if self.kind != "ess":
            return np.inf
        return self.rated_power_kw * self.packet_len_discharge_s / 3600.0 / self.eta_dis

    def energy_kwh(self, x: float) -> float:
        scale = self.capacitance_kwh_per_c if self.kind == "tcl" else 1.0
        return scale * (x - self.x_min)

    @property
    def capacity_kwh(self) -> float:
        return self.energy_kwh(self.x_max)


@dataclass
class DeviceState:
    mode: Mode
    x: float
    packet_remaining_s: float = 0.0
    pending: Optional[str] = None  # "charge" | "discharge"
    opt_out_dir: int = 0  # +1 recovering upward, -1 downward
    rng_stream: int = 0


@dataclass(frozen=True)
class PacketRequest:
    device_id: int
    kind: str
    timestamp_s: float
    power_kw: float
    energy_kwh: float

    def to_record(self) -> dict:
        return {"v": REQUEST_SCHEMA_VERSION, "device_id": self.device_id, "kind": self.kind,
                "timestamp_s": self.timestamp_s, "power_kw": self.power_kw,
                "energy_kwh": self.energy_kwh}

    @classmethod
    def from_record(cls, rec: dict) -> "PacketRequest":
        if rec.get("v") != REQUEST_SCHEMA_VERSION:
            raise ValueError(f"unsupported request schema version {rec.get('v')!r}")
        return cls(int(rec["device_id"]), str(rec["kind"]), float(rec["timestamp_s"]),
                   float(rec["power_kw"]), float(rec["energy_kwh"]))


def request_probability(x: float, config: PemDeviceConfig, dt_s: float,
                        kind: str = "charge") -> float:
    """Probability that an OFF device asks for a packet during ``dt_s``.

    Rate ``mu0 (x_max - x)/(x - x_min)`` for charge, mirrored for discharge.
    """
    lo, hi, mu0 = config.x_min, config.x_max, config.request_rate_max_per_s
    if kind == "discharge":
        lo, hi, x = -hi, -lo, -x
    if x >= hi:
        return 0.0
    if x <= lo:
        return 1.0
    mu = mu0 * (hi - x) / (x - lo)
    return float(min(max(-np.expm1(-mu * dt_s), 0.0), 1.0))


def _device_power_kw(mode, opt_out_dir, config: PemDeviceConfig) -> float:
    p = config.rated_power_kw
    if mode == Mode.CHARGE:
        return p
    if mode == Mode.DISCHARGE:
        return -p
    if mode == Mode.OPT_OUT:
        if opt_out_dir > 0:
            return p
        return -p if config.kind == "ess" else 0.0
    return 0.0


def _advance_x(x, power_kw, config: PemDeviceConfig, dt_s):
    h = dt_s / 3600.0
    if config.kind == "tcl":
        heat = config.eta * power_kw
        return x + h * ((config.ambient_c - x) / config.resistance_c_per_kw + heat) / config.capacitance_kwh_per_c
    if power_kw >= 0:
        return x + h * config.eta_ch * power_kw
    return x + h * power_kw / config.eta_dis


def step_device(state: DeviceState, config: PemDeviceConfig, grant: Optional[bool],
                dt_s: float, u: Sequence[float] = (1.0, 0.0), t_s: float = 0.0,
                device_id: int = 0):
    """Advance one device by ``dt_s``.

    ``grant`` answers the request issued on the previous step (``None`` means
    no answer, which expires the request).  ``u`` is the device's pair of
    uniform draws for this step: request decision and arrival offset.

    Returns ``(next_state, request_or_None, power_kw)``.
    """
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    mode, x = state.mode, state.x
    remaining, opt_dir = state.packet_remaining_s, state.opt_out_dir
    if grant is not None and state.pending is None:
        raise InvalidGrant(device_id)
    if grant and mode == Mode.OFF:
        if state.pending == "charge":
            mode, remaining = Mode.CHARGE, config.packet_len_charge_s
        else:
            mode, remaining = Mode.DISCHARGE, config.packet_len_discharge_s

    power = _device_power_kw(mode, opt_dir, config)
    x = _advance_x(x, power, config, dt_s)

    if mode in (Mode.CHARGE, Mode.DISCHARGE):
        remaining -= dt_s
        if remaining <= _TIMER_EPS:
            mode, remaining = Mode.OFF, 0.0

    if mode == Mode.OFF:
        if x < config.x_min:
            mode, opt_dir = Mode.OPT_OUT, 1
        elif x > config.x_max:
            mode, opt_dir = Mode.OPT_OUT, -1
    elif mode == Mode.OPT_OUT:
        if (opt_dir > 0 and x >= config.setpoint) or (opt_dir < 0 and x <= config.setpoint):
            mode, opt_dir = Mode.OFF, 0

    request = None
    pending = None
    if mode == Mode.OFF:
        p_c = 0.0
        if x + config.charge_packet_rise() <= config.x_max:
            p_c = request_probability(x, config, dt_s, "charge")
        p_d = 0.0
        if config.can_discharge and x - config.discharge_packet_drop() >= config.x_min:
            p_d = request_probability(x, config, dt_s, "discharge")
        if p_c + p_d > 1.0:
            p_c, p_d = p_c / (p_c + p_d), p_d / (p_c + p_d)
        if u[0] < p_c:
            pending = "charge"
        elif u[0] < p_c + p_d:
            pending = "discharge"
        if pending is not None:
            if pending == "charge":
                e = config.charge_packet_rise() * (config.capacitance_kwh_per_c
                                                   if config.kind == "tcl" else 1.0)
            else:
                e = config.discharge_packet_drop()
            request = PacketRequest(device_id, pending, t_s + u[1] * dt_s,
                                    config.rated_power_kw, e)

    nxt = DeviceState(mode, x, remaining, pending, opt_dir, state.rng_stream)
    return nxt, request, power


# ---------------------------------------------------------------------------
# vectorized fleet


def _sample(value, rng: np.random.Generator, n: int) -> np.ndarray:
    """Scalar, or ``[lo, hi]`` for uniform spread."""
    if isinstance(value, (list, tuple)):
        lo, hi = float(value[0]), float(value[1])
        return rng.uniform(lo, hi, n)
    return np.full(n, float(value))


@dataclass
class DeviceGroup:
    """Device population: parameters are scalars or ``[lo, hi]`` uniform ranges."""
    kind: str
    count: int
    rated_power_kw: object
    packet_len_charge_s: float
    packet_len_discharge_s: float
    x_min: object
    x_max: object
    setpoint: object
    request_rate_max_per_s: object
    capacitance_kwh_per_c: object = 0.0
    resistance_c_per_kw: object = 0.0
    ambient_c: object = 20.0
    eta: object = 1.0
    eta_ch: object = 1.0
    eta_dis: object = 1.0


_PARAMS = ("rated_power_kw", "packet_len_charge_s", "packet_len_discharge_s", "x_min", "x_max",
           "setpoint", "request_rate_max_per_s", "capacitance_kwh_per_c", "resistance_c_per_kw",
           "ambient_c", "eta", "eta_ch", "eta_dis")


@dataclass
class FleetStep:
    power_mw: float
    request_ids: np.ndarray
    request_kinds: np.ndarray  # Mode.CHARGE / Mode.DISCHARGE codes
    request_times: np.ndarray

    def requests(self, fleet: "Fleet") -> list:
        return [fleet.make_request(int(i), int(k), float(t))
                for i, k, t in zip(self.request_ids, self.request_kinds, self.request_times)]


class Fleet:
    """A PEM device population stepped in lock-step.

    Every device owns a random stream spawned from the master seed, so a
    device's draws do not depend on how many other devices exist or on the
    order they are processed in.
    """

    BLOCK = 256

    def __init__(self, configs: Sequence[PemDeviceConfig], seed: int, x0=None,
                 track_events: bool = False):
        n = len(configs)
        if n == 0:
            raise ValueError("empty fleet")
        self.configs = list(configs)
        self.n = n
        self.seed = seed
        for name in _PARAMS:
            setattr(self, name, np.array([getattr(c, name) for c in configs], dtype=float))
        self.is_tcl = np.array([c.kind == "tcl" for c in configs])
        self.is_ess = ~self.is_tcl
        # energy scale so that energy_kwh = scale * (x - x_min)
        self.scale = np.where(self.is_tcl, self.capacitance_kwh_per_c, 1.0)
        e = self.rated_power_kw * self.packet_len_charge_s / 3600.0
        self.rise = np.where(self.is_tcl, self.eta * e / np.where(self.is_tcl, self.capacitance_kwh_per_c, 1.0),
                             self.eta_ch * e)
        self.drop = np.where(self.is_ess, self.rated_power_kw * self.packet_len_discharge_s
                             / 3600.0 / self.eta_dis, np.inf)
        self._r = np.where(self.is_tcl, self.resistance_c_per_kw, 1.0)
        self._c = np.where(self.is_tcl, self.capacitance_kwh_per_c, 1.0)

        self.mode = np.zeros(n, dtype=np.int8)
        self.x = np.array([c.setpoint for c in configs], dtype=float) if x0 is None \
            else np.asarray(x0, dtype=float).copy()
        self.remaining = np.zeros(n)
        self.pending = np.zeros(n, dtype=np.int8)
        self.opt_dir = np.zeros(n, dtype=np.int8)
        self.t_s = 0.0

        self._streams = [np.random.default_rng(s)
                         for s in np.random.SeedSequence(seed).spawn(n)]
        self._draws = None
        self._pos = self.BLOCK

        self.track_events = track_events
        self.events = []  # (t_s, device, from_mode, to_mode)
        self._entered = np.zeros(n)
        self.packet_lengths = {Mode.CHARGE: [], Mode.DISCHARGE: []}
        self.x_lo_seen = self.x.copy()
        self.x_hi_seen = self.x.copy()

    # construction ---------------------------------------------------------
    @classmethod
    def from_groups(cls, groups: Sequence[DeviceGroup], seed: int, **kw) -> "Fleet":
        ss = np.random.SeedSequence([seed, 0x9E3779B9])
        param_rng = np.random.default_rng(ss)
        configs, x0 = [], []
        for grp in groups:
            vals = {name: _sample(getattr(grp, name), param_rng, grp.count) for name in _PARAMS}
            for k in range(grp.count):
                cfg = PemDeviceConfig(kind=grp.kind, **{name: float(vals[name][k]) for name in _PARAMS})
                configs.append(cfg)
            lo, hi = vals["x_min"], vals["x_max"]
            x0.append(param_rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo)))
        fleet = cls(configs, seed, x0=np.concatenate(x0), **kw)
        return fleet

    # randomness -----------------------------------------------------------
    def _next_draws(self) -> np.ndarray:
        if self._pos >= self.BLOCK:
            self._draws = np.stack([g.random((self.BLOCK, 2)) for g in self._streams], axis=1)
            self._pos = 0
        d = self._draws[self._pos]
        self._pos += 1
        return d

    # aggregates -----------------------------------------------------------
    def power_kw(self, mode=None, opt_dir=None) -> np.ndarray:
        mode = self.mode if mode is None else mode
        opt_dir = self.opt_dir if opt_dir is None else opt_dir
        p = self.rated_power_kw
        out = np.where(mode == Mode.CHARGE, p, 0.0)
        out = np.where(mode == Mode.DISCHARGE, -p, out)
        opt_up = (mode == Mode.OPT_OUT) & (opt_dir > 0)
        opt_dn = (mode == Mode.OPT_OUT) & (opt_dir < 0) & self.is_ess
        out = np.where(opt_up, p, out)
        return np.where(opt_dn, -p, out)

    def committed_power_mw(self) -> float:
        """Power the fleet will draw next step if no new packet is granted."""
        return float(self.power_kw().sum()) / 1000.0

    def energy_mwh(self) -> float:
        return float((self.scale * (self.x - self.x_min)).sum()) / 1000.0

    def capacity_mwh(self) -> float:
        return float((self.scale * (self.x_max - self.x_min)).sum()) / 1000.0

    def soc_fraction(self) -> float:
        return self.energy_mwh() / self.capacity_mwh()

    def natural_baseline_mw(self) -> float:
        """Consumption that holds every TCL at its setpoint."""
        loss = np.where(self.is_tcl, (self.setpoint - self.ambient_c) / self._r / self.eta, 0.0)
        return float(loss.sum()) / 1000.0

    def mode_counts(self) -> dict:
        counts = np.bincount(self.mode, minlength=4)
        return {m.name: int(counts[m]) for m in Mode}

    def make_request(self, i: int, kind_code: int, t: float) -> PacketRequest:
        if kind_code == Mode.CHARGE:
            e = self.rise[i] * self.scale[i]
            kind = "charge"
        else:
            e = self.drop[i]
            kind = "discharge"
        return PacketRequest(i, kind, t, float(self.rated_power_kw[i]), float(e))

    def device_state(self, i: int) -> DeviceState:
        pend = {0: None, 1: "charge", 2: "discharge"}[int(self.pending[i])]
        return DeviceState(Mode(int(self.mode[i])), float(self.x[i]), float(self.remaining[i]),
                           pend, int(self.opt_dir[i]), i)

    # stepping -------------------------------------------------------------
    def step(self, accept: Optional[np.ndarray] = None, dt_s: float = 1.0) -> FleetStep:
        """Advance all devices by ``dt_s``.

        ``accept`` is a boolean mask over devices answering last step's
        requests; pending requests not accepted are rejected.
        """
        if dt_s <= 0:
            raise ValueError("dt_s must be positive")
        u = self._next_draws()
        t0 = self.t_s
        mode = self.mode.copy()
        if accept is not None:
            accept = np.asarray(accept, dtype=bool)
            bad = accept & (self.pending == 0)
            if bad.any():
                raise InvalidGrant(int(np.flatnonzero(bad)[0]))
            go = accept & (mode == Mode.OFF)
            ch = go & (self.pending == 1)
            di = go & (self.pending == 2)
            mode[ch] = Mode.CHARGE
            mode[di] = Mode.DISCHARGE
            self.remaining = np.where(ch, self.packet_len_charge_s, self.remaining)
            self.remaining = np.where(di, self.packet_len_discharge_s, self.remaining)

        power = self.power_kw(mode, self.opt_dir)
        h = dt_s / 3600.0
        tcl_dx = h * ((self.ambient_c - self.x) / self._r + self.eta * power) / self._c
        ess_dx = np.where(power >= 0, h * self.eta_ch * power, h * power / self.eta_dis)
        x = self.x + np.where(self.is_tcl, tcl_dx, ess_dx)

        in_packet = (mode == Mode.CHARGE) | (mode == Mode.DISCHARGE)
        remaining = np.where(in_packet, self.remaining - dt_s, self.remaining)
        done = in_packet & (remaining <= _TIMER_EPS)
        mode = np.where(done, Mode.OFF, mode).astype(np.int8)
        remaining = np.where(done, 0.0, remaining)

        opt_dir = self.opt_dir.copy()
        off = mode == Mode.OFF
        low = off & (x < self.x_min)
        high = off & (x > self.x_max)
        mode[low | high] = Mode.OPT_OUT
        opt_dir[low] = 1
        opt_dir[high] = -1
        opt = mode == Mode.OPT_OUT
        back = opt & (((opt_dir > 0) & (x >= self.setpoint)) | ((opt_dir < 0) & (x <= self.setpoint)))
        mode[back] = Mode.OFF
        opt_dir[back] = 0

        off = mode == Mode.OFF
        ok_c = off & (x + self.rise <= self.x_max)
        ok_d = off & self.is_ess & (x - self.drop >= self.x_min)
        p_c = np.where(ok_c, _prob(x, self.x_min, self.x_max, self.request_rate_max_per_s, dt_s), 0.0)
        p_d = np.where(ok_d, _prob(-x, -self.x_max, -self.x_min, self.request_rate_max_per_s, dt_s), 0.0)
        tot = p_c + p_d
        over = tot > 1.0
        if over.any():
            p_c = np.where(over, p_c / tot, p_c)
            p_d = np.where(over, p_d / tot, p_d)
        want_c = off & (u[:, 0] < p_c)
        want_d = off & ~want_c & (u[:, 0] < p_c + p_d)
        pending = np.zeros(self.n, dtype=np.int8)
        pending[want_c] = 1
        pending[want_d] = 2

        if self.track_events:
            self._log(t0, dt_s, self.mode, mode)
        self.mode, self.x, self.remaining, self.opt_dir, self.pending = mode, x, remaining, opt_dir, pending
        np.minimum(self.x_lo_seen, x, out=self.x_lo_seen)
        np.maximum(self.x_hi_seen, x, out=self.x_hi_seen)
        self.t_s = t0 + dt_s

        ids = np.flatnonzero(pending)
        kinds = np.where(pending[ids] == 1, Mode.CHARGE, Mode.DISCHARGE).astype(np.int8)
        times = t0 + u[ids, 1] * dt_s
        return FleetStep(float(power.sum()) / 1000.0, ids, kinds, times)

    def _log(self, t0, dt_s, before, after):
        # packets start at the beginning of the step that granted them and
        # end at the end of the step in which the timer expired
        changed = np.flatnonzero(before != after)
        for i in changed:
            self.events.append((t0 + dt_s, int(i), Mode(int(before[i])), Mode(int(after[i]))))
        started = np.flatnonzero(((after == Mode.CHARGE) | (after == Mode.DISCHARGE)) & (before == Mode.OFF))
        self._entered[started] = t0
        # packets that started and ended within a single step never show as a change
        ended = np.flatnonzero(((before == Mode.CHARGE) | (before == Mode.DISCHARGE)) & (after != before))
        for i in ended:
            self.packet_lengths[Mode(int(before[i]))].append(t0 + dt_s - self._entered[i])

    def write_event_log(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t_s,device,from_mode,to_mode\n")
            for t, i, a, b in self.events:
                fh.write(f"{t:.3f},{i},{a.name},{b.name}\n")


def _prob(x, lo, hi, mu0, dt_s):
    with np.errstate(divide="ignore", invalid="ignore"):
        mu = mu0 * (hi - x) / (x - lo)
        p = -np.expm1(-mu * dt_s)
    p = np.where(x >= hi, 0.0, p)
    p = np.where(x <= lo, 1.0, p)
    return np.clip(p, 0.0, 1.0)


def step_fleet(fleet: Fleet, grants: Optional[dict], dt_s: float) -> FleetStep:
    """Dict-keyed wrapper around :meth:`Fleet.step`."""
    accept = np.zeros(fleet.n, dtype=bool)
    for dev, ok in (grants or {}).items():
        if not 0 <= dev < fleet.n:
            raise InvalidGrant(dev, "unknown device")
        if fleet.pending[dev] == 0:
            raise InvalidGrant(dev)
        accept[dev] = bool(ok)
    return fleet.step(accept, dt_s)
