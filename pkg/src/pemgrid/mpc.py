"""Receding-horizon, energy-aware dispatch over a DC network.

Decision variables for every step ``l = 0..M``: generator outputs, VPP
charge and discharge power, and bus angles.  Stored energy is not a
variable; it is the linear expression

    S[l+1] = S[l] + (ts/3600) (eta_ch P_ch[l] - P_dis[l] / eta_dis),  S[0] measured

and its bounds, like the line limits, are softened with penalized slacks.
Generator deviation from the reference is the only cost of substance; a
small quadratic on VPP power splits work between otherwise free assets.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import qp
from .grid import GridModel, VppAsset

log = logging.getLogger(__name__)


class ForecastGap(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


class InfeasibleInitialState(UserWarning):
    """A measured value sat outside its box and was clamped."""


class MpcInfeasible(UserWarning):
    """The QP was infeasible; the previous commands are being held."""


@dataclass(frozen=True)
class MpcConfig:
    horizon_m: int = 30
    ts_s: float = 60.0
    deviation_costs: Optional[dict] = None  # generator id -> c_G; default from grid
    load_forecast_source: str = "persistence"
    use_terminal_soc_target: Optional[dict] = None  # vpp id -> MWh
    terminal_weight: float = 1.0e2
    soft_quadratic: float = 1.0e4
    soft_linear: float = 1.0e4
    vpp_quadratic: float = 1.0e-4  # per MW^2, scaled by 1/p_max
    throughput_cost: float = 0.0
    agc_period_s: float = 4.0
    tol: float = 1e-7
    max_iter: int = 100

    def __post_init__(self):
        if self.horizon_m < 2:
            raise ValueError("horizon_m must be at least 2")
        if self.ts_s < self.agc_period_s:
            raise ValueError("ts_s must be at least the AGC period")
        if self.load_forecast_source != "persistence":
            raise ValueError(f"unknown forecast source {self.load_forecast_source!r}")


@dataclass
class MeasuredState:
    t_s: float
    p_gen_mw: dict
    p_vpp_mw: dict  # net, charging positive
    soc_mwh: dict
    line_flows_mw: Optional[np.ndarray] = None


@dataclass
class VarIndex:
    pg: np.ndarray  # (M+1, NG)
    pch: np.ndarray  # (M+1, NV)
    pdis: np.ndarray
    theta: np.ndarray  # (M+1, NB)
    s_up: np.ndarray  # (M+1, NV) slack on S[l+1] <= S_max
    s_lo: np.ndarray
    s_line: np.ndarray  # (M+1, NL)
    n: int

    @property
    def n_core(self) -> int:
        return self.pg.size + self.pch.size + self.pdis.size + self.theta.size

    def is_bijective(self) -> bool:
        allidx = np.concatenate([a.ravel() for a in (self.pg, self.pch, self.pdis, self.theta,
                                                     self.s_up, self.s_lo, self.s_line)])
        return allidx.size == self.n and np.array_equal(np.sort(allidx), np.arange(self.n))


@dataclass
class MpcProblemInstance:
    grid: GridModel
    config: MpcConfig
    measured: MeasuredState
    p_gen0: np.ndarray  # clamped measurements used as anchors
    p_ch0: np.ndarray
    p_dis0: np.ndarray
    s0: np.ndarray
    references: np.ndarray  # (M+1, NG)
    forecast: np.ndarray  # (M+1, NB) net load per bus
    problem: qp.QpProblem
    index: VarIndex
    soc_rows: np.ndarray  # sparse map x -> S[1..M+1] increments, per vpp
    extra_fixed: list = field(default_factory=list)


@dataclass
class MpcSolutionTrajectory:
    p_gen: np.ndarray
    p_ch: np.ndarray
    p_dis: np.ndarray
    theta: np.ndarray
    flows: np.ndarray
    soc: np.ndarray  # (M+2, NV) including S[0]
    deviation_cost: float
    qp_objective: float
    status: str
    kkt: Optional[qp.KktReport] = None
    solution: Optional[qp.QpSolution] = None

    def first_step(self, grid: GridModel) -> dict:
        """Commands applied to the plant: generator MW and VPP net MW."""
        cmds = {g.id: float(self.p_gen[0, i]) for i, g in enumerate(grid.generators)}
        for j, v in enumerate(grid.vpps):
            cmds[v.id] = float(self.p_ch[0, j] - self.p_dis[0, j])
        return cmds


def soc_rollout(s0: float, p_ch, p_dis, asset: VppAsset, ts_s: float) -> np.ndarray:
    """Stored energy after each step; returns ``len(p_ch) + 1`` values."""
    p_ch = np.asarray(p_ch, dtype=float)
    p_dis = np.asarray(p_dis, dtype=float)
    if p_ch.shape != p_dis.shape:
        raise ValueError("charge and discharge sequences differ in length")
    h = ts_s / 3600.0
    out = np.empty(p_ch.size + 1)
    out[0] = s = float(s0)
    for k in range(p_ch.size):
        s = s + h * (asset.eta_ch * p_ch[k] - p_dis[k] / asset.eta_dis)
        out[k + 1] = s
    return out


def persistence_forecast(net_load_by_bus, horizon_m: int) -> np.ndarray:
    return np.tile(np.asarray(net_load_by_bus, dtype=float), (horizon_m + 1, 1))


def _clamp(name, value, lo, hi, tol=1e-6):
    if value < lo - tol or value > hi + tol:
        msg = f"measured {name} = {value:.6g} outside [{lo:.6g}, {hi:.6g}]; clamped"
        log.warning(msg)
        warnings.warn(msg, InfeasibleInitialState, stacklevel=3)
    return min(max(value, lo), hi)


def _as_traj(v, rows, cols, what) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 1 and a.size == cols:
        return np.tile(a, (rows, 1))
    if a.ndim != 2 or a.shape[1] != cols:
        raise ValueError(f"{what} has shape {a.shape}, expected (*, {cols})")
    if a.shape[0] < rows:
        raise ForecastGap(f"{what} covers {a.shape[0]} steps, horizon needs {rows}")
    return a[:rows]


def build_problem(grid: GridModel, measured: MeasuredState, references, forecasts,
                  config: MpcConfig, fixed_zero: Optional[list] = None) -> MpcProblemInstance:
    """Assemble the horizon QP.

    ``references`` is per generator, either a vector or an ``(M+1, NG)``
    array; ``forecasts`` is net bus load, a vector (held) or ``(M+1, NB)``.
    ``fixed_zero`` lists ``("ch"|"dis", step, vpp_index)`` variables pinned at
    zero.
    """
    M, ts = config.horizon_m, config.ts_s
    L = M + 1
    gens, vpps, lines = grid.generators, grid.vpps, grid.lines
    NG, NV, NB, NL = len(gens), len(vpps), grid.n_bus, len(lines)
    ref = _as_traj(references, L, NG, "references")
    fc = _as_traj(forecasts, L, NB, "forecast")
    h = ts / 3600.0

    # index map
    k = 0

    def block(r, c):
        nonlocal k
        out = np.arange(k, k + r * c).reshape(r, c)
        k += r * c
        return out

    pg, pch, pdis, th = block(L, NG), block(L, NV), block(L, NV), block(L, NB)
    s_up, s_lo, s_line = block(L, NV), block(L, NV), block(L, NL)
    idx = VarIndex(pg, pch, pdis, th, s_up, s_lo, s_line, k)
    n = k

    # measured anchors
    p_gen0 = np.array([_clamp(f"{g.id} power", measured.p_gen_mw[g.id], g.p_min_mw, g.p_max_mw)
                       for g in gens])
    p_ch0 = np.zeros(NV)
    p_dis0 = np.zeros(NV)
    s0 = np.zeros(NV)
    for j, v in enumerate(vpps):
        p = measured.p_vpp_mw[v.id]
        p = _clamp(f"{v.id} power", p, -v.p_dis_max_mw, v.p_ch_max_mw)
        p_ch0[j], p_dis0[j] = max(p, 0.0), max(-p, 0.0)
        s0[j] = _clamp(f"{v.id} energy", measured.soc_mwh[v.id], v.s_min_mwh, v.s_max_mwh)

    costs = config.deviation_costs or {}
    c_g = np.array([float(costs.get(g.id, g.deviation_cost)) for g in gens])

    # objective
    Pd = np.zeros(n)
    q = np.zeros(n)
    r0 = 0.0
    for i in range(NG):
        Pd[pg[:, i]] = 2.0 * c_g[i]
        q[pg[:, i]] = -2.0 * c_g[i] * ref[:, i]
        r0 += float(c_g[i] * np.sum(ref[:, i] ** 2))
    for j, v in enumerate(vpps):
        w_ch = config.vpp_quadratic / max(v.p_ch_max_mw, 1e-9)
        w_dis = config.vpp_quadratic / max(v.p_dis_max_mw, 1e-9)
        Pd[pch[:, j]] = 2.0 * w_ch
        Pd[pdis[:, j]] = 2.0 * w_dis
        q[pch[:, j]] += config.throughput_cost
        q[pdis[:, j]] += config.throughput_cost
    for sl in (s_up, s_lo, s_line):
        Pd[sl.ravel()] = 2.0 * config.soft_quadratic
        q[sl.ravel()] = config.soft_linear

    # energy rows: S[l+1] - S0 = sum_{k<=l} h (eta_ch pch[k] - pdis[k]/eta_dis)
    soc_r, soc_c, soc_v = [], [], []
    for j, v in enumerate(vpps):
        for l in range(L):
            row = j * L + l
            for kk in range(l + 1):
                soc_r += [row, row]
                soc_c += [pch[kk, j], pdis[kk, j]]
                soc_v += [h * v.eta_ch, -h / v.eta_dis]
    soc_map = sp.csr_matrix((soc_v, (soc_r, soc_c)), shape=(NV * L, n))

    P = sp.diags(Pd).tocsr()
    target = config.use_terminal_soc_target or {}
    for j, v in enumerate(vpps):
        if v.id in target:
            # w (S[M+1] - target)^2 with S[M+1] = S0 + a'x
            a = soc_map[j * L + M]
            w = config.terminal_weight
            P = P + 2.0 * w * (a.T @ a)
            off = s0[j] - target[v.id]
            q += 2.0 * w * off * a.toarray().ravel()
            r0 += w * off ** 2

    # equalities: bus balance and reference angle
    A_r, A_c, A_v, b, eq_labels = [], [], [], [], []
    Bbus = grid.susceptance_matrix() * grid.base_mva  # MW/rad
    gen_bus = [grid.bus_index(g.bus) for g in gens]
    vpp_bus = [grid.bus_index(v.bus) for v in vpps]
    row = 0
    for l in range(L):
        for bi in range(NB):
            for i in range(NG):
                if gen_bus[i] == bi:
                    A_r.append(row); A_c.append(pg[l, i]); A_v.append(1.0)
            for j in range(NV):
                if vpp_bus[j] == bi:
                    A_r += [row, row]; A_c += [pch[l, j], pdis[l, j]]; A_v += [-1.0, 1.0]
            for bj in range(NB):
                if Bbus[bi, bj] != 0.0:
                    A_r.append(row); A_c.append(th[l, bj]); A_v.append(-Bbus[bi, bj])
            b.append(fc[l, bi])
            eq_labels.append(f"balance[l={l},bus={grid.buses[bi].id}]")
            row += 1
        A_r.append(row); A_c.append(th[l, grid.bus_index(grid.slack_bus)]); A_v.append(1.0)
        b.append(0.0)
        eq_labels.append(f"ref_angle[l={l}]")
        row += 1
    A = sp.csr_matrix((A_v, (A_r, A_c)), shape=(row, n))

    # inequalities
    C_r, C_c, C_v, lo, hi, labels = [], [], [], [], [], []
    crow = [0]

    def add(cols, vals, l_, u_, label):
        r = crow[0]
        C_r.extend([r] * len(cols)); C_c.extend(cols); C_v.extend(vals)
        lo.append(l_); hi.append(u_); labels.append(label)
        crow[0] += 1

    fixed = set(fixed_zero or [])
    for l in range(L):
        for i, g in enumerate(gens):
            add([pg[l, i]], [1.0], g.p_min_mw, g.p_max_mw, f"gen_limit[l={l},{g.id}]")
            r = g.ramp_mw_per_min * ts / 60.0
            if l == 0:
                add([pg[0, i]], [1.0], p_gen0[i] - r, p_gen0[i] + r, f"gen_ramp[l=0,{g.id}]")
            else:
                add([pg[l, i], pg[l - 1, i]], [1.0, -1.0], -r, r, f"gen_ramp[l={l},{g.id}]")
        for j, v in enumerate(vpps):
            ch_hi = 0.0 if ("ch", l, j) in fixed else v.p_ch_max_mw
            dis_hi = 0.0 if ("dis", l, j) in fixed else v.p_dis_max_mw
            add([pch[l, j]], [1.0], 0.0, ch_hi, f"vpp_charge_limit[l={l},{v.id}]")
            add([pdis[l, j]], [1.0], 0.0, dis_hi, f"vpp_discharge_limit[l={l},{v.id}]")
            rc = v.ramp_ch_mw_per_min * ts / 60.0
            rd = v.ramp_dis_mw_per_min * ts / 60.0
            if l == 0:
                add([pch[0, j]], [1.0], p_ch0[j] - rc, p_ch0[j] + rc, f"vpp_charge_ramp[l=0,{v.id}]")
                add([pdis[0, j]], [1.0], p_dis0[j] - rd, p_dis0[j] + rd,
                    f"vpp_discharge_ramp[l=0,{v.id}]")
            else:
                add([pch[l, j], pch[l - 1, j]], [1.0, -1.0], -rc, rc, f"vpp_charge_ramp[l={l},{v.id}]")
                add([pdis[l, j], pdis[l - 1, j]], [1.0, -1.0], -rd, rd,
                    f"vpp_discharge_ramp[l={l},{v.id}]")
            srow = soc_map[j * L + l]
            cols, vals = list(srow.indices), list(srow.data)
            add(cols + [s_up[l, j]], vals + [-1.0], -np.inf, v.s_max_mwh - s0[j],
                f"soc_max[l={l + 1},{v.id}]")
            add(cols + [s_lo[l, j]], vals + [1.0], v.s_min_mwh - s0[j], np.inf,
                f"soc_min[l={l + 1},{v.id}]")
            add([s_up[l, j]], [1.0], 0.0, np.inf, f"soc_slack_up[l={l},{v.id}]")
            add([s_lo[l, j]], [1.0], 0.0, np.inf, f"soc_slack_lo[l={l},{v.id}]")
        for kl, ln in enumerate(lines):
            a, bb = grid.bus_index(ln.from_bus), grid.bus_index(ln.to_bus)
            y = grid.base_mva * ln.susceptance_pu
            add([th[l, a], th[l, bb], s_line[l, kl]], [y, -y, -1.0], -np.inf, ln.flow_limit_mw,
                f"line_max[l={l},{ln.id}]")
            add([th[l, a], th[l, bb], s_line[l, kl]], [y, -y, 1.0], -ln.flow_limit_mw, np.inf,
                f"line_min[l={l},{ln.id}]")
            add([s_line[l, kl]], [1.0], 0.0, np.inf, f"line_slack[l={l},{ln.id}]")
    C = sp.csr_matrix((C_v, (C_r, C_c)), shape=(crow[0], n))

    prob = qp.QpProblem(P, q, A, b, C, lo, hi, r0, eq_labels, labels)
    return MpcProblemInstance(grid, config, measured, p_gen0, p_ch0, p_dis0, s0, ref, fc,
                              prob, idx, soc_map, list(fixed))


def extract_trajectory(inst: MpcProblemInstance, sol: qp.QpSolution) -> MpcSolutionTrajectory:
    idx, grid = inst.index, inst.grid
    x = sol.x
    pg, pch, pdis, th = x[idx.pg], x[idx.pch], x[idx.pdis], x[idx.theta]
    L = pg.shape[0]
    A = grid.incidence()
    bvec = np.array([ln.susceptance_pu for ln in grid.lines])
    flows = grid.base_mva * (th @ A.T) * bvec if len(grid.lines) else np.zeros((L, 0))
    soc = np.empty((L + 1, len(grid.vpps)))
    for j, v in enumerate(grid.vpps):
        soc[0, j] = inst.s0[j]
        soc[1:, j] = inst.s0[j] + inst.soc_rows[j * L:(j + 1) * L] @ x
    costs = inst.config.deviation_costs or {}
    c_g = np.array([float(costs.get(g.id, g.deviation_cost)) for g in grid.generators])
    dev = float(np.sum(c_g * (pg - inst.references) ** 2))
    return MpcSolutionTrajectory(pg, pch, pdis, th, flows, soc, dev, sol.objective, sol.status,
                                 sol.kkt, sol)


def verify_trajectory(inst: MpcProblemInstance, traj: MpcSolutionTrajectory,
                      tol: float = 1e-4) -> list:
    """Re-check every constraint family from raw data; returns violations.

    Soft bounds (line limits, energy limits) are checked against their
    limits plus the solved slack, so a violation here means the solver's
    answer is inconsistent, not that a soft limit was used.
    """
    grid, cfg = inst.grid, inst.config
    x = traj.solution.x if traj.solution is not None else None
    out = []
    L = traj.p_gen.shape[0]
    ts = cfg.ts_s
    # balance
    Bbus = grid.susceptance_matrix() * grid.base_mva
    for l in range(L):
        inj = np.zeros(grid.n_bus)
        for i, g in enumerate(grid.generators):
            inj[grid.bus_index(g.bus)] += traj.p_gen[l, i]
        for j, v in enumerate(grid.vpps):
            inj[grid.bus_index(v.bus)] -= traj.p_ch[l, j] - traj.p_dis[l, j]
        mism = inj - Bbus @ traj.theta[l] - inst.forecast[l]
        if np.max(np.abs(mism)) > tol:
            out.append(f"balance l={l}: {np.max(np.abs(mism)):.3g} MW")
        if abs(traj.theta[l, grid.bus_index(grid.slack_bus)]) > 1e-9:
            out.append(f"reference angle l={l}")
    # generators
    for i, g in enumerate(grid.generators):
        p = traj.p_gen[:, i]
        if np.any(p < g.p_min_mw - tol) or np.any(p > g.p_max_mw + tol):
            out.append(f"{g.id} outside limits")
        r = g.ramp_mw_per_min * ts / 60.0
        steps = np.diff(np.concatenate([[inst.p_gen0[i]], p]))
        if np.any(np.abs(steps) > r + tol):
            out.append(f"{g.id} ramp")
    # vpps
    for j, v in enumerate(grid.vpps):
        pc, pd = traj.p_ch[:, j], traj.p_dis[:, j]
        if np.any(pc < -tol) or np.any(pc > v.p_ch_max_mw + tol):
            out.append(f"{v.id} charge limits")
        if np.any(pd < -tol) or np.any(pd > v.p_dis_max_mw + tol):
            out.append(f"{v.id} discharge limits")
        for seq, a0, r in ((pc, inst.p_ch0[j], v.ramp_ch_mw_per_min), (pd, inst.p_dis0[j], v.ramp_dis_mw_per_min)):
            if np.any(np.abs(np.diff(np.concatenate([[a0], seq]))) > r * ts / 60.0 + tol):
                out.append(f"{v.id} ramp")
        roll = soc_rollout(inst.s0[j], pc, pd, v, ts)
        if np.max(np.abs(roll - traj.soc[:, j])) > tol:
            out.append(f"{v.id} energy recursion")
        su = x[inst.index.s_up[:, j]] if x is not None else np.zeros(L)
        sl = x[inst.index.s_lo[:, j]] if x is not None else np.zeros(L)
        if np.any(roll[1:] > v.s_max_mwh + su + tol) or np.any(roll[1:] < v.s_min_mwh - sl - tol):
            out.append(f"{v.id} energy bounds")
    # lines
    for k, ln in enumerate(grid.lines):
        s = x[inst.index.s_line[:, k]] if x is not None else np.zeros(L)
        if np.any(np.abs(traj.flows[:, k]) > ln.flow_limit_mw + s + tol):
            out.append(f"line {ln.id} limit")
    return out


def solve_instance(inst: MpcProblemInstance, warm: Optional[qp.QpSolution] = None) -> qp.QpSolution:
    cfg = inst.config
    return qp.solve(inst.problem, tol=cfg.tol, max_iter=cfg.max_iter, warm_start=warm)


@dataclass
class MpcStep:
    commands: dict
    trajectory: Optional[MpcSolutionTrajectory]
    status: str
    fallback: bool
    instance: MpcProblemInstance


class MpcController:
    """Receding-horizon loop with a hold-last-feasible fallback.

    VPP charge and discharge are free to overlap in the QP but the plant
    only sees their difference; when a solution overlaps, the smaller side
    of that step is pinned to zero and the problem re-solved.
    """

    MAX_REPAIRS = 4

    def __init__(self, grid: GridModel, config: MpcConfig, dump_dir=None):
        self.grid = grid
        self.config = config
        self.last_commands: Optional[dict] = None
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.calls = 0
        self.history = []

    def step(self, measured: MeasuredState, references, forecasts) -> MpcStep:
        fixed = []
        for _ in range(self.MAX_REPAIRS + 1):
            inst = build_problem(self.grid, measured, references, forecasts, self.config, fixed)
            sol = solve_instance(inst)
            if sol.status != "optimal":
                break
            traj = extract_trajectory(inst, sol)
            overlap = np.minimum(traj.p_ch, traj.p_dis) > 1e-6
            if not overlap.any():
                break
            for l, j in zip(*np.nonzero(overlap)):
                net = traj.p_ch[l, j] - traj.p_dis[l, j]
                fixed.append(("dis" if net >= 0 else "ch", int(l), int(j)))
        self.calls += 1
        if self.dump_dir is not None:
            self._dump(inst, sol)
        if sol.status == "max_iter":
            raise SolverFailure(f"QP hit max_iter at t={measured.t_s:.0f} s")
        if sol.status == "infeasible":
            msg = (f"MPC infeasible at t={measured.t_s:.0f} s; holding last commands "
                   f"({(sol.certificate or {}).get('constraints', [])[:5]})")
            log.warning(msg)
            warnings.warn(msg, MpcInfeasible, stacklevel=2)
            held = self.last_commands
            if held is None:
                held = {g.id: float(measured.p_gen_mw[g.id]) for g in self.grid.generators}
                held.update({v.id: float(measured.p_vpp_mw[v.id]) for v in self.grid.vpps})
            return MpcStep(dict(held), None, sol.status, True, inst)
        traj = extract_trajectory(inst, sol)
        cmds = traj.first_step(self.grid)
        self.last_commands = cmds
        self.history.append((measured.t_s, cmds))
        return MpcStep(cmds, traj, sol.status, False, inst)

    def _dump(self, inst, sol):
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        stem = self.dump_dir / f"mpc_{self.calls:05d}"
        qp.dump_problem(inst.problem, f"{stem}.qp")
        with open(f"{stem}.x", "w") as fh:
            fh.write(f"status {sol.status}\n")
            for v in sol.x:
                fh.write(f"{float(v)!r}\n")


def receding_horizon_step(instance: MpcProblemInstance, solver=None) -> tuple:
    """Solve one built instance; returns (first-step commands, trajectory)."""
    solver = solver or solve_instance
    sol = solver(instance)
    if sol.status == "max_iter":
        raise SolverFailure("QP hit max_iter without a certificate")
    if sol.status != "optimal":
        return None, None
    traj = extract_trajectory(instance, sol)
    return traj.first_step(instance.grid), traj
