"""Area control error and integral AGC dispatch.

Commands are set-point deviations in injection convention: positive means
"inject more" (raise generation, discharge or consume less).  Nothing here
looks at stored energy; a resource that cannot deliver is only visible
through the power limits the caller passes in.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

_EPS = 1e-9


class AllSaturated(RuntimeError):
    def __init__(self, surplus_mw: float):
        super().__init__(f"all AGC participants saturated; {surplus_mw:.3f} MW undelivered")
        self.surplus_mw = surplus_mw


@dataclass(frozen=True)
class AgcConfig:
    bias_mw_per_hz: float
    participation: dict
    integral_gain_per_s: float = 1.0 / 30.0
    agc_period_s: float = 4.0

    def __post_init__(self):
        if self.bias_mw_per_hz <= 0:
            raise ValueError("bias_mw_per_hz must be positive")
        if self.integral_gain_per_s <= 0 or self.agc_period_s <= 0:
            raise ValueError("integral gain and period must be positive")
        if not self.participation:
            raise ValueError("participation map is empty")
        if any(f < 0 for f in self.participation.values()):
            raise ValueError("participation fractions must be non-negative")
        total = sum(self.participation.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"participation fractions sum to {total}, expected 1")


@dataclass(frozen=True)
class ResourceLimits:
    lo_mw: float
    hi_mw: float
    ramp_mw: float = math.inf  # per AGC period


@dataclass
class AgcState:
    ace_integral_mw_s: float = 0.0
    last_commands: dict = field(default_factory=dict)


@dataclass
class AgcDispatch:
    state: AgcState
    commands: dict
    requested: dict
    surplus_mw: float
    saturated: bool


def compute_ace(freq_dev_hz: float, tie_dev_mw: float, config: AgcConfig) -> float:
    return tie_dev_mw + config.bias_mw_per_hz * freq_dev_hz


def agc_dispatch(state: AgcState, ace_mw: float, config: AgcConfig,
                 resource_limits: dict, strict: bool = False) -> AgcDispatch:
    """One AGC period: integrate ACE, split, clamp, redistribute once.

    Integration is frozen while the undelivered surplus would grow
    (conditional-integration anti-windup).
    """
    dt = config.agc_period_s
    integral = state.ace_integral_mw_s + ace_mw * dt
    total = -config.integral_gain_per_s * integral

    ids = list(config.participation)
    requested = {r: config.participation[r] * total for r in ids}
    lo, hi = {}, {}
    for r in ids:
        lim = resource_limits[r]
        last = state.last_commands.get(r, 0.0)
        lo[r] = max(lim.lo_mw, last - lim.ramp_mw)
        hi[r] = min(lim.hi_mw, last + lim.ramp_mw)
        if lo[r] > hi[r]:
            # power box moved away from the ramp window: power limits win
            edge = lim.lo_mw if last + lim.ramp_mw < lim.lo_mw else lim.hi_mw
            lo[r] = hi[r] = edge

    cmd = {r: min(max(requested[r], lo[r]), hi[r]) for r in ids}
    clamped = {r for r in ids if abs(cmd[r] - requested[r]) > _EPS}
    surplus = sum(requested[r] - cmd[r] for r in ids)

    if abs(surplus) > _EPS:
        free = [r for r in ids if r not in clamped]
        room = {r: (hi[r] - cmd[r]) if surplus > 0 else (cmd[r] - lo[r]) for r in free}
        total_room = sum(room.values())
        if total_room > _EPS:
            share = min(1.0, abs(surplus) / total_room)
            for r in free:
                cmd[r] += math.copysign(room[r] * share, surplus)
        surplus = total - sum(cmd.values())

    saturated = abs(surplus) > 1e-6
    if saturated and (-ace_mw) * surplus > 0:
        integral = state.ace_integral_mw_s
    if saturated:
        log.debug("AGC saturated, %.3f MW undelivered", surplus)
        if strict:
            raise AllSaturated(surplus)

    new_state = AgcState(integral, dict(cmd))
    return AgcDispatch(new_state, cmd, requested, surplus, saturated)
