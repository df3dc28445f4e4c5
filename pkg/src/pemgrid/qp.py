"""Convex QP solver (primal-dual interior point) with KKT certificates.

Problem form::

    minimize    1/2 x'Px + q'x + r0
    subject to  A x = b
                l <= C x <= u        (entries may be +-inf; l == u is an equality)

The solver is Mehrotra's predictor-corrector on the one-sided form
``G x + s = h, s >= 0``, solving the regularized reduced KKT system with a
sparse LU factorization plus iterative refinement.  Duals are reported on
the two-sided form: ``lam > 0`` presses on the upper bound, ``lam < 0`` on
the lower.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import lsq_linear

log = logging.getLogger(__name__)

DENSE_PROBE_MAX_N = 5000
FORMAT_HEADER = "# pemgrid-qp v1"


class DimensionMismatch(ValueError):
    pass


class NonConvex(ValueError):
    pass


def _csr(M, shape) -> sp.csr_matrix:
    if M is None:
        return sp.csr_matrix(shape)
    M = sp.csr_matrix(M, dtype=float)
    if M.shape != shape:
        raise DimensionMismatch(f"matrix has shape {M.shape}, expected {shape}")
    return M


def _vec(v, n, name, fill=0.0) -> np.ndarray:
    if v is None:
        return np.full(n, fill)
    v = np.asarray(v, dtype=float).ravel()
    if v.shape != (n,):
        raise DimensionMismatch(f"{name} has length {v.size}, expected {n}")
    return v


@dataclass
class QpProblem:
    P: object
    q: object
    A: object = None
    b: object = None
    C: object = None
    l: object = None
    u: object = None
    r0: float = 0.0
    eq_labels: Optional[list] = None
    ineq_labels: Optional[list] = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        n = q.size
        self.q = q
        P = _csr(self.P, (n, n))
        self.P = ((P + P.T) * 0.5).tocsr()
        m_eq = 0 if self.A is None else sp.csr_matrix(self.A).shape[0]
        m_in = 0 if self.C is None else sp.csr_matrix(self.C).shape[0]
        self.A = _csr(self.A, (m_eq, n))
        self.b = _vec(self.b, m_eq, "b")
        self.C = _csr(self.C, (m_in, n))
        self.l = _vec(self.l, m_in, "l", -np.inf)
        self.u = _vec(self.u, m_in, "u", np.inf)
        if np.isnan(self.l).any() or np.isnan(self.u).any():
            raise ValueError("bounds contain NaN")
        self.r0 = float(self.r0)
        if self.eq_labels is not None and len(self.eq_labels) != m_eq:
            raise DimensionMismatch("eq_labels length does not match A")
        if self.ineq_labels is not None and len(self.ineq_labels) != m_in:
            raise DimensionMismatch("ineq_labels length does not match C")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0] + self.C.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.r0)

    def label(self, kind: str, i: int) -> str:
        labels = self.eq_labels if kind == "eq" else self.ineq_labels
        return labels[i] if labels is not None else f"{kind}[{i}]"


@dataclass
class KktReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float
    scaled: tuple
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.scaled) <= self.tol

    def as_tuple(self) -> tuple:
        return (self.stationarity, self.primal, self.dual, self.complementarity)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray  # equality duals
    lam: np.ndarray  # two-sided inequality duals
    objective: float
    status: str  # optimal | infeasible | max_iter
    iterations: int
    kkt: Optional[KktReport] = None
    dual_objective: float = math.nan
    certificate: Optional[dict] = None

    @property
    def kkt_residuals(self) -> tuple:
        return self.kkt.as_tuple() if self.kkt is not None else (math.nan,) * 4


def _inf_norm(v) -> float:
    v = np.asarray(v)
    return float(np.max(np.abs(v))) if v.size else 0.0


def check_kkt(problem: QpProblem, solution, tol: float = 1e-6) -> KktReport:
    """Residuals of the KKT conditions, recomputed from the raw problem data.

    Scaled residuals divide each absolute value by one plus the size of the
    terms it is built from; ``passed`` compares those with ``tol``.
    """
    p = problem
    x, y, lam = solution.x, solution.y, solution.lam
    Px, Aty, Ctl = p.P @ x, p.A.T @ y, p.C.T @ lam
    stat = _inf_norm(Px + p.q + Aty + Ctl)
    stat_s = 1.0 + max(_inf_norm(Px), _inf_norm(p.q), _inf_norm(Aty), _inf_norm(Ctl))

    Ax, Cx = p.A @ x, p.C @ x
    viol = np.concatenate([np.abs(Ax - p.b), np.maximum(Cx - p.u, 0.0), np.maximum(p.l - Cx, 0.0)])
    prim = _inf_norm(viol)
    fin = lambda v: v[np.isfinite(v)]
    prim_s = 1.0 + max(_inf_norm(Ax), _inf_norm(p.b), _inf_norm(Cx),
                       _inf_norm(fin(p.l)), _inf_norm(fin(p.u)))

    eq_rows = p.l == p.u
    lam_up = np.where(eq_rows, 0.0, np.maximum(lam, 0.0))
    lam_lo = np.where(eq_rows, 0.0, np.maximum(-lam, 0.0))
    dual = _inf_norm(np.concatenate([lam_up[~np.isfinite(p.u)], lam_lo[~np.isfinite(p.l)]]))
    dual_s = 1.0 + _inf_norm(lam)

    gap_up = np.where(np.isfinite(p.u), p.u - Cx, 0.0)
    gap_lo = np.where(np.isfinite(p.l), Cx - p.l, 0.0)
    comp = _inf_norm(np.concatenate([lam_up * gap_up, lam_lo * gap_lo]))
    comp_s = 1.0 + abs(p.objective(x))

    return KktReport(stat, prim, dual, comp,
                     (stat / stat_s, prim / prim_s, dual / dual_s, comp / comp_s), tol)


def check_convex(P: sp.spmatrix, tol: float = 1e-9) -> None:
    """Raise :class:`NonConvex` unless P is positive semidefinite (up to tol)."""
    n = P.shape[0]
    if n == 0 or P.nnz == 0:
        return
    scale = max(1.0, abs(P).max())
    off = P - sp.diags(P.diagonal())
    if off.nnz == 0 or not off.count_nonzero():
        if P.diagonal().min() < -tol * scale:
            raise NonConvex(f"negative diagonal entry {P.diagonal().min():.3g}")
        return
    shift = tol * scale
    if n <= DENSE_PROBE_MAX_N:
        try:
            np.linalg.cholesky(P.toarray() + shift * np.eye(n))
        except np.linalg.LinAlgError:
            raise NonConvex("Cholesky probe failed: cost matrix is not PSD") from None
    else:
        lo = spla.eigsh(P, k=1, which="SA", return_eigenvectors=False)[0]
        if lo < -shift:
            raise NonConvex(f"smallest eigenvalue {lo:.3g} < 0")


class _OneSided:
    """``G x <= h`` view of the two-sided rows, with equality rows split off."""

    def __init__(self, p: QpProblem):
        eq = np.isfinite(p.l) & (p.l == p.u)
        up = np.flatnonzero(~eq & np.isfinite(p.u))
        lo = np.flatnonzero(~eq & np.isfinite(p.l))
        self.eq_rows = np.flatnonzero(eq)
        self.up, self.lo = up, lo
        C = p.C
        self.A = sp.vstack([p.A, C[self.eq_rows]]).tocsr()
        self.b = np.concatenate([p.b, p.u[self.eq_rows]])
        self.G = sp.vstack([C[up], -C[lo]]).tocsr()
        self.h = np.concatenate([p.u[up], -p.l[lo]])
        self.n_eq_orig = p.A.shape[0]
        self.m_in = p.C.shape[0]

    def two_sided(self, y, z):
        """Map one-sided duals back to (y_eq, lam)."""
        lam = np.zeros(self.m_in)
        lam[self.eq_rows] += y[self.n_eq_orig:]
        k = self.up.size
        lam[self.up] += z[:k]
        lam[self.lo] -= z[k:]
        return y[:self.n_eq_orig], lam

    def one_sided(self, y_eq, lam):
        y = np.concatenate([y_eq, lam[self.eq_rows]])
        z = np.concatenate([np.maximum(lam[self.up], 0.0), np.maximum(-lam[self.lo], 0.0)])
        return y, z


def _certificate(p: QpProblem, os_: _OneSided, y, z, tol) -> Optional[dict]:
    """Farkas test: A'y + G'z = 0, z >= 0, b'y + h'z < 0 proves infeasibility."""
    norm = _inf_norm(y) + _inf_norm(z)
    if norm < 1e3:  # duals still bounded: nothing diverging yet
        return None
    yn, zn = y / norm, z / norm
    res = _inf_norm(os_.A.T @ yn + os_.G.T @ zn)
    val = float(os_.b @ yn + os_.h @ zn)
    if val < -tol and res < 1e-3 * abs(val):
        return _describe(p, os_, yn, zn, val, res)
    return None


def _describe(p, os_, yn, zn, val, res) -> dict:
    y_eq, lam = os_.two_sided(yn, zn)
    thr = 1e-6 * max(_inf_norm(y_eq), _inf_norm(lam), 1e-300)
    rows = [p.label("eq", i) for i in np.flatnonzero(np.abs(y_eq) > thr)]
    rows += [p.label("ineq", i) for i in np.flatnonzero(np.abs(lam) > thr)]
    return {"y": y_eq, "lam": lam, "farkas_value": val, "residual": res, "constraints": rows}


def solve(problem: QpProblem, tol: float = 1e-6, max_iter: int = 100,
          warm_start: Optional[QpSolution] = None, reg: float = 1e-9) -> QpSolution:
    """Solve ``problem``; status is optimal, infeasible or max_iter."""
    p = problem
    check_convex(p.P)
    n = p.n
    bad = np.flatnonzero(p.l > p.u)
    if bad.size:
        lam = np.zeros(p.C.shape[0])
        cert = {"constraints": [p.label("ineq", i) for i in bad], "farkas_value": -math.inf,
                "reason": "lower bound above upper bound"}
        return QpSolution(np.zeros(n), np.zeros(p.A.shape[0]), lam, math.nan, "infeasible", 0,
                          certificate=cert)

    os_ = _OneSided(p)
    A, b, G, h, P = os_.A, os_.b, os_.G, os_.h, p.P
    me, mi = A.shape[0], G.shape[0]
    q = p.q

    def kkt_matrix(W):
        H = P + (G.T @ sp.diags(W) @ G if mi else sp.csr_matrix((n, n)))
        top = sp.hstack([H, A.T])
        bot = sp.hstack([A, sp.csr_matrix((me, me))])
        K0 = sp.vstack([top, bot]).tocsc()
        delta = reg
        for _ in range(6):
            d = np.concatenate([np.full(n, delta), np.full(me, -delta)])
            K = (K0 + sp.diags(d)).tocsc()
            try:
                return K0, spla.splu(K, permc_spec="COLAMD")
            except RuntimeError:
                delta *= 100.0
        raise np.linalg.LinAlgError("KKT system could not be factorized")

    def solve_kkt(K0, lu, rhs):
        sol = lu.solve(rhs)
        for _ in range(3):
            r = rhs - K0 @ sol
            if _inf_norm(r) <= 1e-14 * (1.0 + _inf_norm(rhs)):
                break
            sol = sol + lu.solve(r)
        return sol

    def make_solution(x, y, z, status, it, cert=None):
        x = x + 0.0
        y_eq, lam = os_.two_sided(y, z)
        sol = QpSolution(x, y_eq, lam, p.objective(x), status, it, certificate=cert)
        sol.kkt = check_kkt(p, sol, tol)
        sol.dual_objective = float(-0.5 * x @ (P @ x) - b @ y - h @ z + p.r0) if status == "optimal" else math.nan
        return sol

    if mi == 0:
        K0, lu = kkt_matrix(np.zeros(0))
        sol = solve_kkt(K0, lu, np.concatenate([-q, b]))
        x, y = sol[:n], sol[n:]
        res = make_solution(x, y, np.zeros(0), "optimal", 1)
        if not res.kkt.passed:
            res.status = "infeasible" if res.kkt.scaled[1] > tol else "max_iter"
            if res.status == "infeasible":
                res.certificate = {"constraints": [p.label("eq", i) for i in range(p.A.shape[0])],
                                   "reason": "inconsistent equality constraints"}
        return res

    def polish(x, y, z, s, sol, it):
        # Guess the active set from the interior point (z > s), solve the
        # equality-constrained KKT system on it and keep the answer only if it
        # is primal and dual feasible and no worse on the KKT check.  Bounds
        # where z and s are of similar size are ambiguous, so two more guesses
        # are tried with those left out or put in.
        tried = set()
        for ratio in (1.0, 1e2, 1e-2):
            act = np.flatnonzero(z > ratio * s)
            if act.tobytes() in tried:
                continue
            tried.add(act.tobytes())
            cand = polish_on(act, it)
            if cand is not None and max(cand.kkt.scaled) <= max(max(sol.kkt.scaled), 1e-2 * tol):
                return cand
        return sol

    def polish_on(act, it):
        Ga = G[act]
        ma = act.size
        d = 1e-10
        K0 = sp.bmat([[P, A.T, Ga.T], [A, None, None], [Ga, None, None]], format="csc")
        reg = sp.diags(np.concatenate([np.full(n, d), np.full(me + ma, -d)]))
        try:
            lu = spla.splu((K0 + reg).tocsc(), permc_spec="COLAMD")
        except RuntimeError:
            return None
        rhs = np.concatenate([-q, b, h[act]])
        v = solve_kkt(K0, lu, rhs)
        xp, yp, za = v[:n], v[n:n + me], v[n + me:]
        if not np.all(np.isfinite(v)):
            return None
        slack = h - G @ xp
        scale = 1.0 + _inf_norm(h)
        if slack.size and slack.min() < -1e-9 * scale:
            return None
        if za.size and za.min() < -1e-9 * (1.0 + _inf_norm(za)):
            # dependent active rows leave the multipliers non-unique; look
            # for a sign-correct set by bounded least squares instead
            if me + ma > 2000:
                return None
            J = sp.hstack([A.T, Ga.T]).toarray()
            lb = np.concatenate([np.full(me, -np.inf), np.zeros(ma)])
            fit = lsq_linear(J, -(P @ xp + q), bounds=(lb, np.inf), method="bvls",
                             tol=1e-14, lsmr_tol=None)
            yp, za = fit.x[:me], fit.x[me:]
        zp = np.zeros(mi)
        zp[act] = np.maximum(za, 0.0)
        return make_solution(xp, yp, zp, "optimal", it)

    # starting point
    if warm_start is not None and warm_start.x is not None and warm_start.x.shape == (n,):
        x = warm_start.x.astype(float).copy()
        y, z = os_.one_sided(warm_start.y, warm_start.lam)
        s = h - G @ x
        floor = 1e-2 * (1.0 + _inf_norm(h))
        s = np.maximum(s, floor)
        z = np.maximum(z, floor)
    else:
        K0, lu = kkt_matrix(np.ones(mi))
        sol = solve_kkt(K0, lu, np.concatenate([-q + G.T @ h, b]))
        x, y = sol[:n], sol[n:]
        s = h - G @ x
        z = -s.copy()
        a = -s.min()
        if a >= -1e-8:
            s = s + 1.0 + a
        a = -z.min()
        if a >= -1e-8:
            z = z + 1.0 + a

    def max_step(v, dv):
        neg = dv < 0
        if not neg.any():
            return 1.0
        return float(min(1.0, np.min(-v[neg] / dv[neg])))

    best, stall, mu_prev = (np.inf, x, y, z), 0, np.inf
    for it in range(1, max_iter + 1):
        rd = P @ x + q + A.T @ y + G.T @ z
        rp = A @ x - b
        rg = G @ x + s - h
        mu = float(s @ z) / mi

        trial = make_solution(x, y, z, "optimal", it - 1)
        # the objective can be a small difference of large terms (r0 against
        # x'Px), so the gap is judged against the size of those terms
        xPx = float(x @ (P @ x))
        gap_scale = 1.0 + max(abs(trial.objective), 0.5 * abs(xPx), abs(float(q @ x)), abs(p.r0))
        gap = abs(trial.objective - trial.dual_objective) / gap_scale
        score = max(max(trial.kkt.scaled), gap)
        if score <= 1e-2 * tol:
            return polish(x, y, z, s, trial, it - 1)
        if score < best[0]:
            best, stall = (score, x, y, z), 0
        elif mu < 0.9 * mu_prev:
            stall = 0
        else:
            stall += 1
            if stall >= 5:
                break
        mu_prev = mu
        cert = _certificate(p, os_, y, z, tol)
        if cert is not None:
            return make_solution(x, y, z, "infeasible", it - 1, cert)

        W = z / s
        try:
            K0, lu = kkt_matrix(W)
        except np.linalg.LinAlgError:
            break

        def direction(r_sz):
            rhs_x = -rd - G.T @ (W * rg - r_sz / s)
            d = solve_kkt(K0, lu, np.concatenate([rhs_x, -rp]))
            dx, dy = d[:n], d[n:]
            dz = W * (G @ dx + rg) - r_sz / s
            ds = (-r_sz - s * dz) / z
            return dx, dy, dz, ds

        dx, dy, dz, ds = direction(s * z)
        a_aff = min(max_step(s, ds), max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / mi
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
        a = min(1.0, 0.99 * min(max_step(s, ds), max_step(z, dz)))
        x, y, z, s = x + a * dx, y + a * dy, z + a * dz, s + a * ds
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            break

    score, x, y, z = best
    trial = make_solution(x, y, z, "optimal" if score <= tol else "max_iter", it)
    if trial.status == "optimal":
        return polish(x, y, z, h - G @ x, trial, it)
    cert = _certificate(p, os_, y, z, tol)
    if cert is not None:
        trial.status, trial.certificate = "infeasible", cert
    return trial


# ---------------------------------------------------------------------------
# plain-text dump / load


def _write_matrix(fh, name, M):
    M = sp.coo_matrix(M)
    fh.write(f"{name} {M.shape[0]} {M.shape[1]} {M.nnz}\n")
    order = np.lexsort((M.col, M.row))
    for i, j, v in zip(M.row[order], M.col[order], M.data[order]):
        fh.write(f"{i} {j} {float(v)!r}\n")


def _write_vector(fh, name, v):
    fh.write(f"{name} {len(v)}\n")
    for x in v:
        fh.write(f"{float(x)!r}\n")


def dump_problem(problem: QpProblem, path) -> None:
    """Write the problem as plain text.

    Layout: a header line, then ``r0 <value>``, then blocks ``P``, ``q``,
    ``A``, ``b``, ``C``, ``l``, ``u``.  Matrix blocks start with
    ``<name> <rows> <cols> <nnz>`` followed by ``i j value`` triplets; vector
    blocks with ``<name> <len>`` and one value per line.  Optional
    ``eq_labels`` / ``ineq_labels`` blocks list one label per line.
    Floats use ``repr`` so a round trip is exact.
    """
    p = problem
    with open(path, "w") as fh:
        fh.write(FORMAT_HEADER + "\n")
        fh.write(f"r0 {p.r0!r}\n")
        _write_matrix(fh, "P", p.P)
        _write_vector(fh, "q", p.q)
        _write_matrix(fh, "A", p.A)
        _write_vector(fh, "b", p.b)
        _write_matrix(fh, "C", p.C)
        _write_vector(fh, "l", p.l)
        _write_vector(fh, "u", p.u)
        for name, labels in (("eq_labels", p.eq_labels), ("ineq_labels", p.ineq_labels)):
            if labels is not None:
                fh.write(f"{name} {len(labels)}\n")
                for s in labels:
                    fh.write(f"{s}\n")


def load_problem(path) -> QpProblem:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise ValueError(f"{path}: not a pemgrid QP dump")
    pos = 1
    parts = {}
    labels = {}

    def take():
        nonlocal pos
        line = lines[pos]
        pos += 1
        return line

    while pos < len(lines):
        head = take().split()
        if not head:
            continue
        name = head[0]
        if name == "r0":
            parts["r0"] = float(head[1])
        elif name in ("P", "A", "C"):
            r, c, nnz = map(int, head[1:4])
            rows, cols, vals = [], [], []
            for _ in range(nnz):
                i, j, v = take().split()
                rows.append(int(i)); cols.append(int(j)); vals.append(float(v))
            parts[name] = sp.csr_matrix((vals, (rows, cols)), shape=(r, c))
        elif name in ("q", "b", "l", "u"):
            k = int(head[1])
            parts[name] = np.array([float(take()) for _ in range(k)])
        elif name in ("eq_labels", "ineq_labels"):
            k = int(head[1])
            labels[name] = [take() for _ in range(k)]
        else:
            raise ValueError(f"{path}: unknown block {name!r}")
    return QpProblem(parts["P"], parts["q"], parts["A"], parts["b"], parts["C"], parts["l"],
                     parts["u"], parts.get("r0", 0.0), labels.get("eq_labels"),
                     labels.get("ineq_labels"))
