"""Two-stage approximation via linear decision rules on continuous states.

Every non-root continuous state vector is replaced by an affine function
of node data: x_n = Lambda' basis(n), where the basis is the node's
stochastic data vector (for the relief application, its demand vector)
plus an intercept column.  Variants differ in how Lambda blocks are
shared:

    th  one block per stage over the full data history
    t   one block per stage over the current-stage data
    m   one block per stage and Markov state over the current-stage data

The substitution removes all parent-child coupling through x, so the
model collapses to two stages: a master MIP over (z, x_root, y_root,
Lambda, theta) holding every row free of non-root locals, and one LP per
non-root node over its locals only.  The master is solved by branch and
cut; cost-to-go variables theta_{t,m} are hybrid, one per stage and
Markov state, and optimality cuts aggregate the member-node duals with
path-probability weights.  Feasibility cuts come from phase-1 duals of an
infeasible node LP.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .aggregate import AggregationMap, GroupKey, build_policy_graph
from .errors import InfeasibleModel, NumericalFailure, Overflow
from .lp_engine import (INFEASIBLE, OPTIMAL, CutOracle, LpSolution, MipSolution,
                        branch_and_cut, infeasibility_lp, solve_lp)
from .model import GE, LE, LpProblem, MipProblem, Msilp
from .tree import path as tree_path

VIOL_GUARD = 1e-9
VARIANTS = ("th", "t", "m")
FIRST_STAGE_CAP = 2_000_000


@dataclass(frozen=True)
class LdrVariant:
    kind: str
    include_intercept: bool = True

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown LDR variant {self.kind!r}")


def node_basis(m: Msilp, nid: int) -> np.ndarray:
    """Stage-data vector entering the decision rule (without intercept)."""
    nd = m.data[nid]
    if m.basis_rows is not None:
        return np.asarray(nd.b[m.basis_rows], dtype=float)
    return np.concatenate([nd.b, nd.f, nd.g, nd.c, nd.d, nd.h]).astype(float)


@dataclass
class _NodeLp:
    rows: np.ndarray            # linking-row indices kept in stage 2
    lp: LpProblem               # over the node's locals
    R: sp.csr_matrix            # rhs = const + R @ first_stage
    const: np.ndarray
    p: float


@dataclass
class LdrLayout:
    z_off: dict[GroupKey, int]
    x_off: int
    y_off: int
    lam_off: dict[tuple, int]
    lam_cols: dict[tuple, int]  # basis length (incl. intercept) per block
    theta_off: dict[tuple, int]  # (stage, state attrs) -> column
    n_cols: int


@dataclass
class LdrModel:
    msilp: Msilp
    agg: AggregationMap
    variant: LdrVariant
    master: MipProblem
    layout: LdrLayout
    node_lps: dict[int, _NodeLp]
    second_stage_keys: dict          # dedup key -> node ids
    theta_keys: list[tuple]          # (stage, state attrs), scan order

    @property
    def n_second_stage(self) -> int:
        return len(self.second_stage_keys)


def _lam_key(variant: LdrVariant, m: Msilp, nid: int) -> tuple:
    node = m.tree.node(nid)
    if variant.kind == "m":
        return ("m", node.stage, node.mc_state.attrs)
    return (variant.kind, node.stage)


def _stage_basis_len(m: Msilp) -> dict[int, int]:
    out: dict[int, int] = {}
    for node in m.tree.nodes:
        n = node_basis(m, node.id).size
        if out.setdefault(node.stage, n) != n:
            raise ValueError(f"stage {node.stage} has nodes with different data "
                             f"lengths; no uniform decision-rule basis exists")
    return out


def build_ldr_model(m: Msilp, agg: AggregationMap, variant: LdrVariant,
                    theta_lb: float = 0.0, cap: int = FIRST_STAGE_CAP) -> LdrModel:
    tree = m.tree
    k, l, r = m.k, m.l, m.r
    blen = _stage_basis_len(m)
    icpt = 1 if variant.include_intercept else 0

    # first-stage columns
    z_off = {g: i * l for i, g in enumerate(agg.group_index)}
    x_off = l * len(agg.group_index)
    y_off = x_off + k
    col = y_off + r
    lam_off: dict[tuple, int] = {}
    lam_cols: dict[tuple, int] = {}
    for node in tree.nodes:
        if node.stage == 1:
            continue
        key = _lam_key(variant, m, node.id)
        if key in lam_off:
            continue
        if variant.kind == "th":
            nb = sum(blen[s] for s in range(1, node.stage + 1)) + icpt
        else:
            nb = blen[node.stage] + icpt
        lam_off[key] = col
        lam_cols[key] = nb
        col += k * nb
    theta_off: dict[tuple, int] = {}
    theta_keys: list[tuple] = []
    for t in range(2, tree.stages + 1):
        for attrs in sorted({tree.node(nid).mc_state.attrs for nid in tree.stage_nodes(t)}):
            theta_off[(t, attrs)] = col
            theta_keys.append((t, attrs))
            col += 1
    if col > cap:
        raise Overflow(f"LDR first stage needs {col} columns, cap is {cap}")
    n = col

    basis_of: dict[int, np.ndarray] = {}
    for node in tree.nodes:
        if node.stage == 1:
            continue
        if variant.kind == "th":
            hist = [node_basis(m, nid) for nid in tree_path(tree, node.id)]
            vec = np.concatenate(hist)
        else:
            vec = node_basis(m, node.id)
        if icpt:
            vec = np.concatenate([vec, [1.0]])
        basis_of[node.id] = vec

    def x_expr(nid: int) -> list[list[tuple[int, float]]]:
        """Per state coordinate, the (column, coefficient) list of x_n."""
        if nid == tree.root:
            return [[(x_off + q, 1.0)] for q in range(k)]
        key = _lam_key(variant, m, nid)
        off, nb = lam_off[key], lam_cols[key]
        vec = basis_of[nid]
        return [[(off + q * nb + j, float(vec[j])) for j in range(nb) if vec[j]]
                for q in range(k)]

    obj = np.zeros(n)
    lo = np.full(n, -np.inf)
    up = np.full(n, np.inf)
    integer = np.zeros(n, dtype=bool)
    root = m.data[tree.root]
    for node in tree.nodes:
        nd = m.data[node.id]
        zc = z_off[agg.node_to_group[node.id]]
        obj[zc:zc + l] += node.p * nd.c
        lo[zc:zc + l] = np.maximum(lo[zc:zc + l], nd.z_lo)
        up[zc:zc + l] = np.minimum(up[zc:zc + l], nd.z_up)
        integer[zc:zc + l] = True
        if node.id != tree.root and np.any(nd.d):
            for q in range(k):
                if nd.d[q]:
                    for c, v in x_expr(node.id)[q]:
                        obj[c] += node.p * nd.d[q] * v
    obj[x_off:x_off + k] = root.d
    obj[y_off:y_off + r] = root.h
    lo[x_off:x_off + k] = root.x_lo
    up[x_off:x_off + k] = root.x_up
    lo[y_off:y_off + r] = root.y_lo
    up[y_off:y_off + r] = root.y_up
    for key in theta_keys:
        obj[theta_off[key]] = 1.0
        lo[theta_off[key]] = theta_lb

    rows_i, cols_j, vals, senses, rhs = [], [], [], [], []
    seen: set = set()

    def add_row(cv: dict[int, float], sense: str, b: float):
        ent = tuple(sorted((c, round(v, 12)) for c, v in cv.items() if abs(v) > 1e-12))
        sig = (sense, round(b, 12), ent)
        if sig in seen:
            return
        seen.add(sig)
        i = len(rhs)
        for c, v in ent:
            rows_i.append(i); cols_j.append(c); vals.append(v)
        senses.append(sense); rhs.append(b)

    def acc(cv, mat, i, expr_cols, sign=1.0):
        if mat is None:
            return
        s, e = mat.indptr[i], mat.indptr[i + 1]
        for t in range(s, e):
            for c, v in expr_cols[mat.indices[t]]:
                cv[c] = cv.get(c, 0.0) + sign * mat.data[t] * v

    node_lps: dict[int, _NodeLp] = {}
    second_keys: dict = {}
    pgraph = None
    if variant.kind in ("t", "m"):
        pgraph = build_policy_graph(tree, agg)

    for node in tree.nodes:
        nd = m.data[node.id]
        nid = node.id
        zc = z_off[agg.node_to_group[nid]]
        zp = None if node.parent is None else z_off[agg.node_to_group[node.parent]]
        xe = x_expr(nid)
        xe_par = None if node.parent is None else x_expr(node.parent)
        # z-rows
        for i in range(nd.g.size):
            cv: dict[int, float] = {}
            if nd.H is not None:
                s, e = nd.H.indptr[i], nd.H.indptr[i + 1]
                for t in range(s, e):
                    c = zc + nd.H.indices[t]
                    cv[c] = cv.get(c, 0.0) + nd.H.data[t]
            if zp is not None and nd.G is not None:
                s, e = nd.G.indptr[i], nd.G.indptr[i + 1]
                for t in range(s, e):
                    c = zp + nd.G.indices[t]
                    cv[c] = cv.get(c, 0.0) - nd.G.data[t]
            add_row(cv, nd.sen_z[i], nd.g[i])
        # state rows, fully substituted
        for i in range(nd.f.size):
            cv = {}
            acc(cv, nd.J, i, xe)
            if xe_par is not None:
                acc(cv, nd.F, i, xe_par, -1.0)
            add_row(cv, nd.sen_x[i], nd.f[i])
        # state bounds become rows once x is an expression
        if nid != tree.root:
            for q in range(k):
                if np.isfinite(nd.x_lo[q]):
                    add_row({c: v for c, v in xe[q]}, GE, float(nd.x_lo[q]))
                if np.isfinite(nd.x_up[q]):
                    add_row({c: v for c, v in xe[q]}, LE, float(nd.x_up[q]))
        # linking rows: master when free of locals, stage 2 otherwise
        if nd.b.size == 0:
            continue
        e_sup = np.zeros(nd.b.size, dtype=bool)
        if nd.E is not None:
            e_sup = np.diff(nd.E.indptr) > 0
        ancestors = tree_path(tree, nid)[:-1] if nd.W is not None else []
        master_rows = np.flatnonzero(~e_sup) if nid != tree.root else \
            np.arange(nd.b.size)
        for i in master_rows:
            cv = {}
            acc(cv, nd.C, i, xe)
            if nd.D is not None:
                s, e = nd.D.indptr[i], nd.D.indptr[i + 1]
                for t in range(s, e):
                    c = zc + nd.D.indices[t]
                    cv[c] = cv.get(c, 0.0) + nd.D.data[t]
            if nid == tree.root and nd.E is not None:
                s, e = nd.E.indptr[i], nd.E.indptr[i + 1]
                for t in range(s, e):
                    c = y_off + nd.E.indices[t]
                    cv[c] = cv.get(c, 0.0) + nd.E.data[t]
            if xe_par is not None:
                acc(cv, nd.A, i, xe_par, -1.0)
            if zp is not None and nd.B is not None:
                s, e = nd.B.indptr[i], nd.B.indptr[i + 1]
                for t in range(s, e):
                    c = zp + nd.B.indices[t]
                    cv[c] = cv.get(c, 0.0) - nd.B.data[t]
            for anc in ancestors:
                za = z_off[agg.node_to_group[anc]]
                s, e = nd.W.indptr[i], nd.W.indptr[i + 1]
                for t in range(s, e):
                    c = za + nd.W.indices[t]
                    cv[c] = cv.get(c, 0.0) - nd.W.data[t]
            add_row(cv, nd.sen_l[i], nd.b[i])
        if nid == tree.root:
            continue
        keep = np.flatnonzero(e_sup)
        if keep.size == 0:
            continue
        # stage-2 LP: E y {sense} const + R w
        ri, ci, vv = [], [], []
        const = np.zeros(keep.size)
        rr, rc, rv = [], [], []
        for out_i, i in enumerate(keep):
            s, e = nd.E.indptr[i], nd.E.indptr[i + 1]
            for t in range(s, e):
                ri.append(out_i); ci.append(nd.E.indices[t]); vv.append(nd.E.data[t])
            const[out_i] = nd.b[i]
            cv = {}
            acc(cv, nd.A, i, xe_par)
            acc(cv, nd.C, i, xe, -1.0)
            if nd.D is not None:
                s, e = nd.D.indptr[i], nd.D.indptr[i + 1]
                for t in range(s, e):
                    c = zc + nd.D.indices[t]
                    cv[c] = cv.get(c, 0.0) - nd.D.data[t]
            if nd.B is not None:
                s, e = nd.B.indptr[i], nd.B.indptr[i + 1]
                for t in range(s, e):
                    c = zp + nd.B.indices[t]
                    cv[c] = cv.get(c, 0.0) + nd.B.data[t]
            for anc in ancestors:
                za = z_off[agg.node_to_group[anc]]
                s, e = nd.W.indptr[i], nd.W.indptr[i + 1]
                for t in range(s, e):
                    c = za + nd.W.indices[t]
                    cv[c] = cv.get(c, 0.0) + nd.W.data[t]
            for c, v in cv.items():
                rr.append(out_i); rc.append(c); rv.append(v)
        lp = LpProblem(
            c=nd.h.copy(),
            A=sp.csr_matrix((vv, (ri, ci)), shape=(keep.size, r)),
            senses=nd.sen_l[keep].copy(),
            rhs=const.copy(), lo=nd.y_lo.copy(), up=nd.y_up.copy(),
        )
        node_lps[nid] = _NodeLp(
            rows=keep, lp=lp,
            R=sp.csr_matrix((rv, (rr, rc)), shape=(keep.size, n)),
            const=const, p=node.p,
        )
        if variant.kind == "th":
            second_keys.setdefault(nid, []).append(nid)
        else:
            second_keys.setdefault(pgraph.node_to_sub[nid], []).append(nid)

    master = MipProblem(
        c=obj, A=sp.csr_matrix((vals, (rows_i, cols_j)), shape=(len(rhs), n)),
        senses=np.array(senses, dtype="<U1"), rhs=np.array(rhs),
        lo=lo, up=up, integer=integer,
    )
    lay = LdrLayout(z_off, x_off, y_off, lam_off, lam_cols, theta_off, n)
    return LdrModel(m, agg, variant, master, lay, node_lps, second_keys, theta_keys)


class _BendersOracle(CutOracle):
    """Algorithm loop: scan (stage, state) groups in order, evaluate every
    member node, emit one aggregated cut for the first group whose hybrid
    cost-to-go variable lags, or a feasibility cut on any infeasible node."""

    def __init__(self, model: LdrModel, eps: float):
        self.model = model
        self.eps = eps
        self.nodes_by_theta: dict[tuple, list[int]] = {key: [] for key in model.theta_keys}
        tree = model.msilp.tree
        for nid in model.node_lps:
            node = tree.node(nid)
            self.nodes_by_theta[(node.stage, node.mc_state.attrs)].append(nid)
        self.cut_count = 0
        self.emitted: list[dict] = []  # kept for audits of cut validity

    def _solve_node(self, nid: int, w: np.ndarray, memo: dict) -> LpSolution:
        nl = self.model.node_lps[nid]
        rhs = nl.const + nl.R @ w
        node = self.model.msilp.tree.node(nid)
        key = (node.stage, node.mc_state.attrs, rhs.tobytes())
        hit = memo.get(key)
        if hit is None:
            nl.lp.rhs = rhs
            hit = solve_lp(nl.lp, want_farkas=False)
            memo[key] = hit
        return hit

    def separate(self, x: np.ndarray):
        model = self.model
        memo: dict = {}
        for key in model.theta_keys:
            nids = self.nodes_by_theta[key]
            if not nids:
                continue
            total = 0.0
            grad = np.zeros(model.layout.n_cols)
            solved: list[tuple[int, LpSolution]] = []
            for nid in nids:
                nl = model.node_lps[nid]
                sol = self._solve_node(nid, x, memo)
                if sol.status == INFEASIBLE:
                    return [self._feasibility_row(nid, x)]
                if sol.status != OPTIMAL:
                    raise NumericalFailure(f"node {nid} LP: {sol.status}")
                total += nl.p * sol.objective
                solved.append((nid, sol))
            theta_hat = float(x[model.layout.theta_off[key]])
            if abs(total - theta_hat) < self.eps * abs(total) + VIOL_GUARD:
                continue
            for nid, sol in solved:
                nl = model.node_lps[nid]
                grad += nl.p * (nl.R.T @ sol.duals)
            const = total - float(grad @ x)
            if theta_hat >= total - VIOL_GUARD:
                continue  # numerically cannot separate
            cols = {int(c): -float(grad[c]) for c in np.flatnonzero(grad)}
            cols[model.layout.theta_off[key]] = cols.get(model.layout.theta_off[key], 0.0) + 1.0
            self.cut_count += 1
            self.emitted.append({"kind": "optimality", "theta_key": key,
                                 "grad": grad.copy(), "const": const,
                                 "gen_w": x.copy(), "gen_value": total})
            return [(cols, GE, const)]
        return []

    def _feasibility_row(self, nid: int, x: np.ndarray):
        nl = self.model.node_lps[nid]
        nl.lp.rhs = nl.const + nl.R @ x
        aux, _ = infeasibility_lp(nl.lp)
        sol = solve_lp(aux, want_farkas=False)
        if sol.status != OPTIMAL or sol.objective <= VIOL_GUARD:
            raise NumericalFailure(f"no violation certificate at node {nid}")
        grad = nl.R.T @ sol.duals
        const = sol.objective - float(grad @ x)
        # violation(w) >= grad.w + const must be forced to zero
        cols = {int(c): -float(grad[c]) for c in np.flatnonzero(grad)}
        self.cut_count += 1
        self.emitted.append({"kind": "feasibility", "node": nid,
                             "grad": grad.copy(), "const": const,
                             "gen_w": x.copy(), "gen_value": sol.objective})
        return cols, GE, const


@dataclass
class LdrSolution(MipSolution):
    z_by_group: dict[GroupKey, np.ndarray] | None = None
    lam: dict[tuple, np.ndarray] | None = None
    cut_count: int = 0
    emitted_cuts: list[dict] = field(default_factory=list)


def benders_solve(model: LdrModel, eps: float = 1e-6,
                  time_limit: float | None = None, rel_gap: float = 1e-6) -> LdrSolution:
    oracle = _BendersOracle(model, eps)
    sol = branch_and_cut(model.master, oracle, time_limit=time_limit,
                         rel_gap=rel_gap, round_heuristic=False)
    if sol.status == INFEASIBLE:
        raise InfeasibleModel("LDR first stage is infeasible")
    out = LdrSolution(status=sol.status, x=sol.x, objective=sol.objective,
                      bound=sol.bound, gap=sol.gap, nodes=sol.nodes,
                      cuts=sol.cuts, cut_count=oracle.cut_count,
                      emitted_cuts=oracle.emitted)
    if sol.x is not None:
        lay = model.layout
        m = model.msilp
        out.z_by_group = {g: sol.x[off:off + m.l].copy()
                          for g, off in lay.z_off.items()}
        out.lam = {key: sol.x[off:off + m.k * lay.lam_cols[key]]
                   .reshape(m.k, lay.lam_cols[key]).copy()
                   for key, off in lay.lam_off.items()}
    return out


def extract_policy(model: LdrModel, sol: LdrSolution) -> tuple[np.ndarray, dict]:
    """Per-node state values implied by the rule, plus the integer policy."""
    m = model.msilp
    tree = m.tree
    lay = model.layout
    x = sol.x
    out = np.zeros((len(tree), m.k))
    out[tree.root] = x[lay.x_off:lay.x_off + m.k]
    for node in tree.nodes:
        if node.stage == 1:
            continue
        key = _lam_key(model.variant, m, node.id)
        lam = x[lay.lam_off[key]:lay.lam_off[key] + m.k * lay.lam_cols[key]] \
            .reshape(m.k, lay.lam_cols[key])
        if model.variant.kind == "th":
            vec = np.concatenate([node_basis(m, nid) for nid in tree_path(tree, node.id)])
        else:
            vec = node_basis(m, node.id)
        if model.variant.include_intercept:
            vec = np.concatenate([vec, [1.0]])
        out[node.id] = lam @ vec
    return out, sol.z_by_group


def evaluate_policy_extensive(m: Msilp, agg: AggregationMap,
                              x_by_node: np.ndarray,
                              z_by_group: dict[GroupKey, np.ndarray]) -> float:
    """Objective of a fully fixed (x, z) policy in the aggregated extensive
    form; locals re-optimized.  Used to confirm extracted policies."""
    from .model import build_aggregated_extensive_form

    prob = build_aggregated_extensive_form(m, agg)
    lay = prob.layout
    for g, off in ((g, lay.z_off[g]) for g in agg.group_index):
        vals = np.asarray(z_by_group[g], dtype=float)
        prob.lo[off:off + m.l] = vals
        prob.up[off:off + m.l] = vals
    for node in m.tree.nodes:
        off = lay.x_off[node.id]
        prob.lo[off:off + m.k] = x_by_node[node.id]
        prob.up[off:off + m.k] = x_by_node[node.id]
    sol = solve_lp(LpProblem(c=prob.c, A=prob.A, senses=prob.senses,
                             rhs=prob.rhs, lo=prob.lo, up=prob.up),
                   want_farkas=False)
    if sol.status != OPTIMAL:
        raise NumericalFailure(f"fixed-policy evaluation: {sol.status}")
    return float(sol.objective)
