"""LP and MIP kernel: simplex solves with duals and Farkas certificates,
plus branch and bound with a lazy-cut callback hook.

The LP solves are delegated to HiGHS through scipy.optimize.linprog; this
module owns the sign conventions, the Farkas synthesis, and the search.

Dual convention (minimization): duals[i] = d obj / d rhs[i], so '>=' rows
carry nonnegative duals and '<=' rows nonpositive ones.  Infeasible solves
return a ray in the same convention; see verify_farkas for the exact
certificate the ray satisfies.

Branch and bound: best-bound node selection, most-fractional branching with
lowest-index tie break, relative gap termination.  When a cut oracle is
supplied, every integer-feasible relaxation solution is offered to the
oracle and the node is re-solved until the oracle returns no cut, which is
what makes lazy Benders-style decompositions exact.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import DimensionMismatch, NumericalFailure
from .model import EQ, GE, LE, LpProblem, MipProblem

FEAS_TOL = 1e-7
INT_TOL = 1e-6
MIP_GAP = 1e-6

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
TIME_LIMIT = "time_limit"


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    lo_duals: np.ndarray | None = None
    up_duals: np.ndarray | None = None
    objective: float | None = None
    dual_objective: float | None = None
    farkas: np.ndarray | None = None


@dataclass
class MipSolution:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    bound: float | None = None
    gap: float | None = None
    nodes: int = 0
    cuts: int = 0


class DeadlineReached(Exception):
    """Internal control-flow signal for time limits."""


def _split(p: LpProblem):
    """ub/eq split of the row system; the structural part is cached on the
    problem object and reused while the matrix is unchanged (rhs edits and
    bound edits do not invalidate it)."""
    cache = getattr(p.A, "_mcsip_split", None)
    if cache is not None:
        a_ub, a_eq, ge, le, eq = cache
    else:
        acsr = p.A.tocsr()
        ge = np.flatnonzero(p.senses == GE)
        le = np.flatnonzero(p.senses == LE)
        eq = np.flatnonzero(p.senses == EQ)
        blocks = []
        if ge.size:
            blocks.append(-acsr[ge])
        if le.size:
            blocks.append(acsr[le])
        a_ub = sp.vstack(blocks).tocsr() if blocks else None
        a_eq = acsr[eq] if eq.size else None
        try:
            p.A._mcsip_split = (a_ub, a_eq, ge, le, eq)
        except AttributeError:
            pass
    rhs_ub = []
    if ge.size:
        rhs_ub.append(-p.rhs[ge])
    if le.size:
        rhs_ub.append(p.rhs[le])
    b_ub = np.concatenate(rhs_ub) if rhs_ub else None
    b_eq = p.rhs[eq] if eq.size else None
    return a_ub, b_ub, a_eq, b_eq, ge, le, eq


def _dual_objective(p: LpProblem, duals, lo_duals, up_duals) -> float:
    val = float(duals @ p.rhs)
    mask = (lo_duals != 0.0) & np.isfinite(p.lo)
    val += float(lo_duals[mask] @ p.lo[mask])
    mask = (up_duals != 0.0) & np.isfinite(p.up)
    val += float(up_duals[mask] @ p.up[mask])
    return val


def solve_lp(p: LpProblem, warm=None, want_farkas: bool = True) -> LpSolution:
    """Solve min c'x s.t. rows, bounds.  `warm` is accepted for interface
    compatibility; HiGHS re-solves from scratch (deterministically)."""
    a_ub, b_ub, a_eq, b_eq, ge, le, eq = _split(p)
    bounds = np.column_stack([p.lo, p.up])
    res = linprog(p.c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                  bounds=bounds, method="highs")
    if res.status == 2:
        sol = LpSolution(status=INFEASIBLE)
        if want_farkas:
            sol.farkas = _farkas_ray(p)
        return sol
    if res.status == 3:
        return LpSolution(status=UNBOUNDED)
    if res.status != 0:
        raise NumericalFailure(f"linprog status {res.status}: {res.message}")
    duals = np.zeros(p.m)
    if res.ineqlin is not None and res.ineqlin.marginals is not None:
        m_ub = np.asarray(res.ineqlin.marginals)
        duals[ge] = -m_ub[: ge.size]          # flipped rows: d obj / d rhs >= 0
        duals[le] = m_ub[ge.size:]
    if eq.size and res.eqlin is not None:
        duals[eq] = np.asarray(res.eqlin.marginals)
    lo_d = np.asarray(res.lower.marginals)
    up_d = np.asarray(res.upper.marginals)
    obj = float(res.fun)
    return LpSolution(
        status=OPTIMAL, x=np.asarray(res.x), duals=duals,
        lo_duals=lo_d, up_duals=up_d, objective=obj,
        dual_objective=_dual_objective(p, duals, lo_d, up_d),
    )


def infeasibility_lp(p: LpProblem) -> tuple[LpProblem, int]:
    """Phase-1 companion of p: minimize total row violation over the same box.

    Returns (problem, slack column start).  The optimal value is 0 iff p is
    feasible; its row duals support the violation as a function of the rhs,
    which is what both the Farkas ray and feasibility cuts are made of.
    """
    n, m = p.n, p.m
    n_slack = int(np.sum(p.senses != EQ)) + 2 * int(np.sum(p.senses == EQ))
    cols_i, cols_j, vals = [], [], []
    scol = n
    for i in range(m):
        if p.senses[i] == GE:
            cols_i.append(i); cols_j.append(scol); vals.append(1.0); scol += 1
        elif p.senses[i] == LE:
            cols_i.append(i); cols_j.append(scol); vals.append(-1.0); scol += 1
        else:
            cols_i.append(i); cols_j.append(scol); vals.append(1.0); scol += 1
            cols_i.append(i); cols_j.append(scol); vals.append(-1.0); scol += 1
    slack = sp.csr_matrix((vals, (cols_i, cols_j)), shape=(m, n + n_slack))
    a = sp.hstack([p.A, sp.csr_matrix((m, n_slack))]).tocsr() + slack
    c = np.concatenate([np.zeros(n), np.ones(n_slack)])
    lo = np.concatenate([p.lo, np.zeros(n_slack)])
    up = np.concatenate([p.up, np.full(n_slack, np.inf)])
    return LpProblem(c=c, A=a, senses=p.senses.copy(), rhs=p.rhs.copy(),
                     lo=lo, up=up), n


def _farkas_ray(p: LpProblem) -> np.ndarray:
    aux, _ = infeasibility_lp(p)
    res = solve_lp(aux, want_farkas=False)
    if res.status != OPTIMAL:
        raise NumericalFailure("phase-1 LP did not solve")
    if res.objective <= FEAS_TOL:
        raise NumericalFailure("phase-1 found the problem feasible")
    return res.duals


def verify_farkas(p: LpProblem, ray: np.ndarray, tol: float = FEAS_TOL) -> float:
    """Margin of the box Farkas certificate; > 0 certifies infeasibility.

    Requires ray >= 0 on '>=' rows and <= 0 on '<=' rows (free on '==');
    the certified statement is sup_{lo<=x<=up} (A' ray)'x < ray'rhs.
    """
    if np.any(ray[p.senses == GE] < -tol) or np.any(ray[p.senses == LE] > tol):
        return -np.inf
    d = p.A.T @ ray
    box = 0.0
    for j in range(p.n):
        if d[j] > tol:
            if not np.isfinite(p.up[j]):
                return -np.inf
            box += d[j] * p.up[j]
        elif d[j] < -tol:
            if not np.isfinite(p.lo[j]):
                return -np.inf
            box += d[j] * p.lo[j]
    return float(ray @ p.rhs - box)


Row = tuple[dict[int, float], str, float]  # (column -> coef, sense, rhs)


def add_rows(p: LpProblem, rows: Sequence[Row]) -> LpProblem:
    """Append rows in place; the problem object keeps its identity."""
    if not rows:
        return p
    ri, ci, vv, rhs_l, sen_l = [], [], [], [], []
    for i, (cols, sense, rhs) in enumerate(rows):
        for j, v in cols.items():
            if j < 0 or j >= p.n:
                raise DimensionMismatch(f"column {j} outside 0..{p.n - 1}")
            ri.append(i); ci.append(j); vv.append(v)
        rhs_l.append(rhs); sen_l.append(sense)
    new = sp.csr_matrix((vv, (ri, ci)), shape=(len(rows), p.n))
    p.A = sp.vstack([p.A, new]).tocsr()
    p.rhs = np.concatenate([p.rhs, rhs_l])
    p.senses = np.concatenate([p.senses, np.array(sen_l, dtype="<U1")])
    return p


class CutOracle:
    """Callback interface for lazy cuts at integer-feasible points.

    separate() must only return rows valid for every integer-feasible point
    of the true problem; returning [] accepts the candidate.
    """

    def separate(self, x: np.ndarray) -> list[Row]:  # pragma: no cover
        raise NotImplementedError


@dataclass(order=True)
class BnbNode:
    bound: float
    seq: int
    lo: np.ndarray = field(compare=False)
    up: np.ndarray = field(compare=False)


def _fractional(x, int_cols, tol):
    if int_cols.size == 0:
        return None, 0.0
    frac = np.abs(x[int_cols] - np.round(x[int_cols]))
    worst = np.argmax(frac)
    return (int_cols[worst], frac[worst]) if frac[worst] > tol else (None, 0.0)


def branch_and_cut(p: MipProblem, oracle: CutOracle | None = None,
                   time_limit: float | None = None, rel_gap: float = MIP_GAP,
                   int_tol: float = INT_TOL, round_heuristic: bool = True,
                   max_cut_passes: int = 100_000) -> MipSolution:
    """Best-bound branch and bound over solve_lp with an optional cut oracle."""
    deadline = None if time_limit is None else time.monotonic() + time_limit
    int_cols = np.flatnonzero(p.integer)
    incumbent, inc_obj = None, np.inf
    heap: list[BnbNode] = []
    seq = 0
    n_cuts = 0
    n_nodes = 0
    heapq.heappush(heap, BnbNode(-np.inf, seq, p.lo.copy(), p.up.copy()))

    def timed_out():
        return deadline is not None and time.monotonic() > deadline

    status = OPTIMAL
    try:
        while heap:
            node = heapq.heappop(heap)
            if node.bound >= inc_obj - rel_gap * max(abs(inc_obj), 1.0):
                continue
            if timed_out():
                heapq.heappush(heap, node)  # keep its bound visible in the summary
                status = TIME_LIMIT
                break
            n_nodes += 1
            sub = LpProblem(c=p.c, A=p.A, senses=p.senses, rhs=p.rhs,
                            lo=node.lo, up=node.up)
            passes = 0
            while True:
                sol = solve_lp(sub, want_farkas=False)
                if sol.status == INFEASIBLE:
                    break
                if sol.status == UNBOUNDED:
                    return MipSolution(status=UNBOUNDED, nodes=n_nodes, cuts=n_cuts)
                col, _ = _fractional(sol.x, int_cols, int_tol)
                if col is not None or oracle is None:
                    break
                cuts = oracle.separate(sol.x)
                if not cuts:
                    break
                add_rows(p, cuts)
                sub.A, sub.senses, sub.rhs = p.A, p.senses, p.rhs
                n_cuts += len(cuts)
                passes += 1
                if passes > max_cut_passes:
                    raise NumericalFailure("cut loop did not terminate")
            if sol.status == INFEASIBLE:
                continue
            if sol.objective >= inc_obj - rel_gap * max(abs(inc_obj), 1.0):
                continue
            col, _ = _fractional(sol.x, int_cols, int_tol)
            if col is None:
                x = sol.x.copy()
                x[int_cols] = np.round(x[int_cols])
                if sol.objective < inc_obj:
                    incumbent, inc_obj = x, sol.objective
                continue
            if round_heuristic and oracle is None and incumbent is None:
                cand = _round_and_fix(p, sub, sol.x, int_cols)
                if cand is not None and cand[1] < inc_obj:
                    incumbent, inc_obj = cand
            floor = np.floor(sol.x[col] + int_tol)
            for lo_v, up_v in ((None, floor), (floor + 1.0, None)):
                lo2, up2 = node.lo.copy(), node.up.copy()
                if lo_v is not None:
                    lo2[col] = max(lo2[col], lo_v)
                if up_v is not None:
                    up2[col] = min(up2[col], up_v)
                if lo2[col] > up2[col]:
                    continue
                seq += 1
                heapq.heappush(heap, BnbNode(sol.objective, seq, lo2, up2))
    except DeadlineReached:
        status = TIME_LIMIT

    open_bound = min((nd.bound for nd in heap), default=np.inf)
    bound = min(inc_obj, open_bound) if status != OPTIMAL else inc_obj
    if incumbent is None:
        if status == TIME_LIMIT:
            return MipSolution(status=TIME_LIMIT, bound=None if not heap else open_bound,
                               nodes=n_nodes, cuts=n_cuts)
        return MipSolution(status=INFEASIBLE, nodes=n_nodes, cuts=n_cuts)
    gap = (inc_obj - bound) / max(abs(inc_obj), 1e-9)
    return MipSolution(status=status, x=incumbent, objective=inc_obj,
                       bound=bound, gap=gap, nodes=n_nodes, cuts=n_cuts)


def _round_and_fix(p: MipProblem, sub: LpProblem, x, int_cols):
    """Fix integers to the rounded relaxation values and re-solve; a cheap
    primal heuristic that is exact whenever the remaining variables are
    continuous."""
    lo2, up2 = sub.lo.copy(), sub.up.copy()
    vals = np.clip(np.round(x[int_cols]), lo2[int_cols], up2[int_cols])
    lo2[int_cols] = vals
    up2[int_cols] = vals
    fixed = LpProblem(c=p.c, A=p.A, senses=p.senses, rhs=p.rhs, lo=lo2, up=up2)
    sol = solve_lp(fixed, want_farkas=False)
    if sol.status != OPTIMAL:
        return None
    xx = sol.x.copy()
    xx[int_cols] = vals
    return xx, sol.objective


def solve_mip(p: MipProblem, **kw) -> MipSolution:
    """branch_and_cut without an oracle."""
    return branch_and_cut(p, oracle=None, **kw)
