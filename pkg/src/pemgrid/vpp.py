"""Virtual power plants: a bulk battery model and a PEM fleet aggregator.

Sign convention: ``p > 0`` is charging (consumption), ``p < 0`` discharging.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .grid import VppAsset
from .pem import REQUEST_SCHEMA_VERSION, Fleet, Mode, PacketRequest

_SOC_TOL = 1e-9


@dataclass
class VppState:
    asset_id: str
    p_actual_mw: float = 0.0
    p_ref_mw: float = 0.0
    soc_mwh: float = 0.0
    pending_requests: list = field(default_factory=list)
    mode_counts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GrantDecision:
    device_id: int
    kind: str
    timestamp_s: float
    accepted: bool
    decision_time_s: float

    def to_record(self) -> dict:
        return {"v": REQUEST_SCHEMA_VERSION, "device_id": self.device_id, "kind": self.kind,
                "timestamp_s": self.timestamp_s, "accepted": self.accepted,
                "decision_time_s": self.decision_time_s}

    @classmethod
    def from_record(cls, rec: dict) -> "GrantDecision":
        if rec.get("v") != REQUEST_SCHEMA_VERSION:
            raise ValueError(f"unsupported decision schema version {rec.get('v')!r}")
        return cls(int(rec["device_id"]), str(rec["kind"]), float(rec["timestamp_s"]),
                   bool(rec["accepted"]), float(rec["decision_time_s"]))


def accept_mask(p_actual_mw, p_ref_mw, deadband_mw, soc_mwh, s_min_mwh, s_max_mwh,
                power_kw, energy_kwh, is_charge, timestamps, device_ids=None) -> np.ndarray:
    """Array form of the arrival-order acceptance policy.

    Charge requests are taken in arrival order while the committed power plus
    the accepted packets stays within ``p_ref + deadband`` and the projected
    energy stays within ``s_max``; the first request that does not fit closes
    the window, so the accepted set is a prefix.  Discharge is mirrored.
    """
    n = len(power_kw)
    out = np.zeros(n, dtype=bool)
    if n == 0:
        return out
    ids = np.arange(n) if device_ids is None else np.asarray(device_ids)
    order = np.lexsort((ids, np.asarray(timestamps)))
    is_charge = np.asarray(is_charge, dtype=bool)[order]
    p = np.asarray(power_kw, dtype=float)[order] / 1000.0
    e = np.asarray(energy_kwh, dtype=float)[order] / 1000.0
    tol = 1e-12
    for want_charge in (True, False):
        sel = np.flatnonzero(is_charge == want_charge)
        if sel.size == 0:
            continue
        cp = np.cumsum(p[sel])
        ce = np.cumsum(e[sel])
        if want_charge:
            ok = (p_actual_mw + cp <= p_ref_mw + deadband_mw + tol) & (soc_mwh + ce <= s_max_mwh + tol)
        else:
            ok = (p_actual_mw - cp >= p_ref_mw - deadband_mw - tol) & (soc_mwh - ce >= s_min_mwh - tol)
        k = int(np.argmin(ok)) if not ok.all() else ok.size
        out[order[sel[:k]]] = True
    return out


def decide_requests(state: VppState, requests: Sequence[PacketRequest], period_s: float,
                    deadband_mw: float = 0.0, s_min_mwh: float = -np.inf,
                    s_max_mwh: float = np.inf, now_s: Optional[float] = None) -> list:
    """Accept or reject a batch of packet requests; one decision per request."""
    if period_s <= 0:
        raise ValueError("period_s must be positive")
    reqs = list(requests)
    mask = accept_mask(state.p_actual_mw, state.p_ref_mw, deadband_mw, state.soc_mwh,
                       s_min_mwh, s_max_mwh,
                       [r.power_kw for r in reqs], [r.energy_kwh for r in reqs],
                       [r.kind == "charge" for r in reqs], [r.timestamp_s for r in reqs],
                       [r.device_id for r in reqs])
    t_dec = now_s if now_s is not None else max((r.timestamp_s for r in reqs), default=0.0)
    return [GrantDecision(r.device_id, r.kind, r.timestamp_s, bool(a), t_dec)
            for r, a in zip(reqs, mask)]


def step_bulk_battery(state: VppState, p_ref_mw: float, dt_s: float,
                      asset: VppAsset) -> VppState:
    """Slew toward the reference, clamp, integrate stored energy.

    A step that would overfill (or overdrain) is trimmed so the energy lands
    exactly on the bound; from there on the battery delivers nothing in that
    direction.
    """
    if dt_s <= 0:
        raise ValueError("dt_s must be positive")
    p0 = state.p_actual_mw
    target = min(max(p_ref_mw, -asset.p_dis_max_mw), asset.p_ch_max_mw)
    if p0 >= 0 and target >= 0:
        rate = asset.ramp_ch_mw_per_min
    elif p0 <= 0 and target <= 0:
        rate = asset.ramp_dis_mw_per_min
    else:
        rate = min(asset.ramp_ch_mw_per_min, asset.ramp_dis_mw_per_min)
    lim = rate * dt_s / 60.0
    p = p0 + min(max(target - p0, -lim), lim)
    p = min(max(p, -asset.p_dis_max_mw), asset.p_ch_max_mw)

    h = dt_s / 3600.0
    s = state.soc_mwh
    if p > 0:
        room = max(asset.s_max_mwh - s, 0.0)
        if asset.eta_ch * p * h >= room - _SOC_TOL:
            p = min(p, room / (asset.eta_ch * h)) if room > _SOC_TOL else 0.0
            s = asset.s_max_mwh
        else:
            s += asset.eta_ch * p * h
    elif p < 0:
        room = max(s - asset.s_min_mwh, 0.0)
        if -p * h / asset.eta_dis >= room - _SOC_TOL:
            p = max(p, -room * asset.eta_dis / h) if room > _SOC_TOL else 0.0
            s = asset.s_min_mwh
        else:
            s += p * h / asset.eta_dis
    return replace(state, p_actual_mw=p, p_ref_mw=p_ref_mw, soc_mwh=s)


def soc_fraction(soc_mwh: float, s_min_mwh: float, s_max_mwh: float) -> float:
    return (soc_mwh - s_min_mwh) / (s_max_mwh - s_min_mwh)


def report(state: VppState, asset: VppAsset) -> tuple:
    """(p_actual_mw, soc_fraction)."""
    return state.p_actual_mw, soc_fraction(state.soc_mwh, asset.s_min_mwh, asset.s_max_mwh)


def battery_headroom(state: VppState, asset: VppAsset) -> tuple:
    """Power the battery can still absorb / deliver, zero at a full / empty store."""
    ch = asset.p_ch_max_mw if state.soc_mwh < asset.s_max_mwh - 1e-6 else 0.0
    dis = asset.p_dis_max_mw if state.soc_mwh > asset.s_min_mwh + 1e-6 else 0.0
    return ch, dis


class FleetVpp:
    """Aggregator wrapped around a :class:`Fleet`.

    Powers are deviations from the fleet's natural baseline, so a reference
    of 0 asks the fleet to hold its devices at their setpoints.  Energy is
    the summed device energy, bounded by the fleet's capacity.
    """

    def __init__(self, fleet: Fleet, asset_id: str = "fleet", deadband_mw: Optional[float] = None,
                 baseline_mw: Optional[float] = None):
        self.fleet = fleet
        self.baseline_mw = fleet.natural_baseline_mw() if baseline_mw is None else baseline_mw
        self.deadband_mw = (float(np.max(fleet.rated_power_kw)) / 1000.0
                            if deadband_mw is None else deadband_mw)
        self._last = None
        self.s_min_mwh = 0.0
        self.s_max_mwh = fleet.capacity_mwh()
        self.state = VppState(asset_id, 0.0, 0.0, fleet.energy_mwh(),
                              mode_counts=fleet.mode_counts())
        self.accepted_mw = 0.0

    @property
    def p_ch_max_mw(self) -> float:
        return float(self.fleet.rated_power_kw.sum()) / 1000.0 - self.baseline_mw

    @property
    def p_dis_max_mw(self) -> float:
        ess = float(self.fleet.rated_power_kw[self.fleet.is_ess].sum()) / 1000.0
        return self.baseline_mw + ess

    def step(self, p_ref_mw: float, dt_s: float = 1.0) -> VppState:
        """Decide last step's requests against ``p_ref_mw``, then advance the fleet."""
        f = self.fleet
        accept = None
        self.accepted_mw = 0.0
        if self._last is not None and self._last.request_ids.size:
            ids = self._last.request_ids
            committed = f.committed_power_mw() - self.baseline_mw
            mask = accept_mask(committed, p_ref_mw, self.deadband_mw, f.energy_mwh(),
                               self.s_min_mwh, self.s_max_mwh, f.rated_power_kw[ids],
                               np.where(self._last.request_kinds == Mode.CHARGE,
                                        f.rise[ids] * f.scale[ids], f.drop[ids]),
                               self._last.request_kinds == Mode.CHARGE,
                               self._last.request_times, ids)
            accept = np.zeros(f.n, dtype=bool)
            accept[ids[mask]] = True
            self.accepted_mw = float(f.rated_power_kw[ids[mask]].sum()) / 1000.0
        st = f.step(accept, dt_s)
        self._last = st
        self.state = VppState(self.state.asset_id, st.power_mw - self.baseline_mw, p_ref_mw,
                              f.energy_mwh(), mode_counts=f.mode_counts())
        return self.state

    def report(self) -> tuple:
        return self.state.p_actual_mw, soc_fraction(self.state.soc_mwh, self.s_min_mwh, self.s_max_mwh)
