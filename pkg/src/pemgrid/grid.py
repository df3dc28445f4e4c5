"""Static grid data model and lossless DC power flow.

Everything at the interface is in MW / MWh; per-unit is used only inside the
flow solve (``base_mva``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import re

import numpy as np
import yaml


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e6``-style exponents as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*\.?[0-9_]*|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."))


def read_yaml(fh):
    return yaml.load(fh, Loader=_Loader)


class GridError(ValueError):
    """Invalid grid description."""


class SingularNetwork(GridError):
    pass


class ImbalanceError(GridError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    area: int
    load_mw: float = 0.0
    renewable_mw: float = 0.0

    @property
    def net_load_mw(self) -> float:
        return self.load_mw - self.renewable_mw


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    susceptance_pu: float
    flow_limit_mw: float


@dataclass(frozen=True)
class Generator:
    id: str
    bus: int
    p_min_mw: float
    p_max_mw: float
    ramp_mw_per_min: float
    droop_pct: float
    inertia_h_s: float
    deviation_cost: float = 1.0
    agc_participation: float = 0.0
    p_sched_mw: Optional[float] = None

    @property
    def rating_mva(self) -> float:
        # machine base used for droop and inertia
        return self.p_max_mw


@dataclass(frozen=True)
class VppAsset:
    id: str
    bus: int
    kind: str  # "bulk_battery" | "pem_fleet"
    p_ch_max_mw: float
    p_dis_max_mw: float
    ramp_ch_mw_per_min: float
    ramp_dis_mw_per_min: float
    s_min_mwh: float
    s_max_mwh: float
    eta_ch: float = 1.0
    eta_dis: float = 1.0
    s0_mwh: float = 0.0

    @property
    def capacity_mwh(self) -> float:
        return self.s_max_mwh - self.s_min_mwh


@dataclass(frozen=True)
class GridModel:
    buses: tuple
    lines: tuple
    generators: tuple
    vpps: tuple
    base_mva: float = 100.0
    slack_bus: int = 1
    name: str = "grid"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {b.id: k for k, b in enumerate(self.buses)})
        validate_grid(self)

    # lookups -------------------------------------------------------------
    def bus_index(self, bus_id: int) -> int:
        return self._index[bus_id]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def generator(self, gen_id: str) -> Generator:
        for g in self.generators:
            if g.id == gen_id:
                return g
        raise KeyError(gen_id)

    def vpp(self, vpp_id: str) -> VppAsset:
        for v in self.vpps:
            if v.id == vpp_id:
                return v
        raise KeyError(vpp_id)

    def area_of_bus(self, bus_id: int) -> int:
        return self.buses[self.bus_index(bus_id)].area

    @property
    def areas(self) -> list:
        return sorted({b.area for b in self.buses})

    def incidence(self) -> np.ndarray:
        """Line-by-bus incidence matrix (+1 at from, -1 at to)."""
        a = np.zeros((len(self.lines), self.n_bus))
        for k, ln in enumerate(self.lines):
            a[k, self.bus_index(ln.from_bus)] = 1.0
            a[k, self.bus_index(ln.to_bus)] = -1.0
        return a

    def susceptance_matrix(self) -> np.ndarray:
        """Bus susceptance (Laplacian) matrix in per-unit."""
        a = self.incidence()
        b = np.array([ln.susceptance_pu for ln in self.lines])
        return a.T @ (b[:, None] * a)

    def tie_lines(self) -> list:
        return [ln for ln in self.lines
                if self.area_of_bus(ln.from_bus) != self.area_of_bus(ln.to_bus)]

    def replace_vpp(self, asset: VppAsset) -> "GridModel":
        vpps = tuple(asset if v.id == asset.id else v for v in self.vpps)
        return GridModel(self.buses, self.lines, self.generators, vpps,
                         self.base_mva, self.slack_bus, self.name)


def validate_grid(model: GridModel) -> None:
    ids = [b.id for b in model.buses]
    if len(set(ids)) != len(ids):
        raise GridError("bus ids must be unique")
    if model.slack_bus not in model._index:
        raise GridError(f"slack_bus {model.slack_bus} is not a bus")
    for ln in model.lines:
        if ln.from_bus == ln.to_bus:
            raise GridError(f"line {ln.id}: from_bus == to_bus")
        for b in (ln.from_bus, ln.to_bus):
            if b not in model._index:
                raise GridError(f"line {ln.id}: unknown bus {b}")
        if ln.susceptance_pu <= 0 or ln.flow_limit_mw <= 0:
            raise GridError(f"line {ln.id}: susceptance and limit must be positive")
    gen_ids = [g.id for g in model.generators]
    if len(set(gen_ids)) != len(gen_ids):
        raise GridError("generator ids must be unique")
    for g in model.generators:
        if g.bus not in model._index:
            raise GridError(f"generator {g.id}: unknown bus {g.bus}")
        if g.p_min_mw > g.p_max_mw:
            raise GridError(f"generator {g.id}: p_min_mw > p_max_mw")
        if g.ramp_mw_per_min <= 0:
            raise GridError(f"generator {g.id}: ramp must be positive")
        if g.deviation_cost < 0:
            raise GridError(f"generator {g.id}: negative deviation_cost")
        if not 0.0 <= g.agc_participation <= 1.0:
            raise GridError(f"generator {g.id}: agc_participation outside [0, 1]")
    for v in model.vpps:
        if v.bus not in model._index:
            raise GridError(f"vpp {v.id}: unknown bus {v.bus}")
        if v.kind not in ("bulk_battery", "pem_fleet"):
            raise GridError(f"vpp {v.id}: unknown kind {v.kind!r}")
        if not 0 <= v.s_min_mwh < v.s_max_mwh:
            raise GridError(f"vpp {v.id}: need 0 <= s_min_mwh < s_max_mwh")
        if not v.s_min_mwh <= v.s0_mwh <= v.s_max_mwh:
            raise GridError(f"vpp {v.id}: s0_mwh outside [s_min, s_max]")
        if not (0 < v.eta_ch <= 1 and 0 < v.eta_dis <= 1):
            raise GridError(f"vpp {v.id}: efficiencies must lie in (0, 1]")
    if model.lines and not _connected(model):
        raise SingularNetwork("network graph is disconnected")


def _connected(model: GridModel) -> bool:
    adj = {b.id: set() for b in model.buses}
    for ln in model.lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    seen, stack = set(), [model.buses[0].id]
    while stack:
        b = stack.pop()
        if b in seen:
            continue
        seen.add(b)
        stack.extend(adj[b] - seen)
    return len(seen) == model.n_bus


# ---------------------------------------------------------------------------
# power flow


@dataclass
class FlowResult:
    flows_mw: np.ndarray
    angles_rad: np.ndarray
    slack_residual_mw: float


def dc_power_flow(model: GridModel, injections_mw: Sequence[float],
                  tol_mw: float = 1e-6) -> FlowResult:
    """Lossless DC flow for a balanced per-bus injection vector.

    A residual below ``tol_mw`` is absorbed at the slack bus; anything larger
    raises :class:`ImbalanceError`.
    """
    p = np.asarray(injections_mw, dtype=float)
    if p.shape != (model.n_bus,):
        raise GridError(f"expected {model.n_bus} injections, got {p.shape}")
    residual = float(p.sum())
    if abs(residual) > tol_mw:
        raise ImbalanceError(f"injections sum to {residual:.6g} MW")
    s = model.bus_index(model.slack_bus)
    keep = [k for k in range(model.n_bus) if k != s]
    bmat = model.susceptance_matrix()
    theta = np.zeros(model.n_bus)
    if keep:
        try:
            theta[keep] = np.linalg.solve(bmat[np.ix_(keep, keep)],
                                          p[keep] / model.base_mva)
        except np.linalg.LinAlgError as exc:
            raise SingularNetwork("reduced susceptance matrix is singular") from exc
    b = np.array([ln.susceptance_pu for ln in model.lines])
    flows = model.base_mva * b * (model.incidence() @ theta)
    return FlowResult(flows, theta, residual)


def check_line_limits(flows_mw: Sequence[float], model: GridModel) -> list:
    """Return ``(line_id, overload_mw)`` for every line over its limit."""
    f = np.asarray(flows_mw, dtype=float)
    if f.shape != (len(model.lines),):
        raise GridError(f"expected {len(model.lines)} flows, got {f.shape}")
    out = []
    for ln, flow in zip(model.lines, f):
        over = abs(flow) - ln.flow_limit_mw
        if over > 0:
            out.append((ln.id, float(over)))
    return out


class PtdfFlow:
    """Cached DC flow for repeated solves on one topology."""

    def __init__(self, model: GridModel):
        self.model = model
        s = model.bus_index(model.slack_bus)
        keep = [k for k in range(model.n_bus) if k != s]
        bmat = model.susceptance_matrix()
        x = np.zeros((model.n_bus, model.n_bus))
        if keep:
            x[np.ix_(keep, keep)] = np.linalg.inv(bmat[np.ix_(keep, keep)])
        b = np.array([ln.susceptance_pu for ln in model.lines])
        self.ptdf = (b[:, None] * model.incidence()) @ x

    def flows(self, injections_mw: np.ndarray) -> np.ndarray:
        return self.ptdf @ injections_mw


# ---------------------------------------------------------------------------
# file format


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise GridError(f"{where}: missing field '{key}'")
    return d[key]


def grid_from_dict(data: dict) -> GridModel:
    try:
        buses = tuple(
            Bus(id=int(_req(b, "id", f"bus[{k}]")), area=int(_req(b, "area", f"bus[{k}]")),
                load_mw=float(b.get("load_mw", 0.0)),
                renewable_mw=float(b.get("renewable_mw", 0.0)))
            for k, b in enumerate(data.get("buses", [])))
        lines = tuple(
            Line(id=int(ln.get("id", k + 1)),
                 from_bus=int(_req(ln, "from_bus", f"lines[{k}]")),
                 to_bus=int(_req(ln, "to_bus", f"lines[{k}]")),
                 susceptance_pu=float(_req(ln, "susceptance_pu", f"lines[{k}]")),
                 flow_limit_mw=float(_req(ln, "flow_limit_mw", f"lines[{k}]")))
            for k, ln in enumerate(data.get("lines", [])))
        gens = []
        for k, g in enumerate(data.get("generators", [])):
            w = f"generators[{k}]"
            gens.append(Generator(
                id=str(_req(g, "id", w)), bus=int(_req(g, "bus", w)),
                p_min_mw=float(_req(g, "p_min_mw", w)), p_max_mw=float(_req(g, "p_max_mw", w)),
                ramp_mw_per_min=float(_req(g, "ramp_mw_per_min", w)),
                droop_pct=float(_req(g, "droop_pct", w)),
                inertia_h_s=float(_req(g, "inertia_h_s", w)),
                deviation_cost=float(g.get("deviation_cost", 1.0)),
                agc_participation=float(g.get("agc_participation", 0.0)),
                p_sched_mw=None if g.get("p_sched_mw") is None else float(g["p_sched_mw"])))
        vpps = []
        for k, v in enumerate(data.get("vpps", [])):
            w = f"vpps[{k}]"
            vpps.append(VppAsset(
                id=str(_req(v, "id", w)), bus=int(_req(v, "bus", w)), kind=str(_req(v, "kind", w)),
                p_ch_max_mw=float(_req(v, "p_ch_max_mw", w)),
                p_dis_max_mw=float(_req(v, "p_dis_max_mw", w)),
                ramp_ch_mw_per_min=float(_req(v, "ramp_ch_mw_per_min", w)),
                ramp_dis_mw_per_min=float(_req(v, "ramp_dis_mw_per_min", w)),
                s_min_mwh=float(_req(v, "s_min_mwh", w)), s_max_mwh=float(_req(v, "s_max_mwh", w)),
                eta_ch=float(v.get("eta_ch", 1.0)), eta_dis=float(v.get("eta_dis", 1.0)),
                s0_mwh=float(v.get("s0_mwh", v.get("s_min_mwh", 0.0)))))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, GridError):
            raise
        raise GridError(str(exc)) from exc
    return GridModel(buses, lines, tuple(gens), tuple(vpps),
                     base_mva=float(data.get("base_mva", 100.0)),
                     slack_bus=int(_req(data, "slack_bus", "grid")),
                     name=str(data.get("name", "grid")))


def load_grid(path) -> GridModel:
    with open(path) as fh:
        data = read_yaml(fh)
    if not isinstance(data, dict):
        raise GridError(f"{path}: expected a mapping at top level")
    return grid_from_dict(data)


def bundled_network(name: str = "five_bus") -> Path:
    return Path(__file__).parent / "networks" / f"{name}.grid"
