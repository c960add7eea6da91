"""Nested decomposition over the policy graph, driven as a lazy-cut oracle.

The master problem owns all aggregated integer blocks, the root-stage
continuous variables and one cost-to-go variable per stage-2 node.  Each
policy-graph subproblem is an LP over its continuous state x, a continuous
copy zeta of every aggregated integer block of its stage onward, its local
variables, and one theta per child subproblem:

    min  d'x + h'y + sum_children p * theta_child
    s.t. J x >= F x_parent + f                     (state rows)
         zeta = zeta_parent                        (copy rows)
         C x + D zeta[own group] + E y >= A x_parent
              + B zeta_parent[parent group] + b    (linking rows)
         theta_child >= cut(x, zeta)               (pooled cuts)

A cut generated from a solved subproblem is the exact dual support of its
value as a function of the incoming state: alpha collects the F/A duals,
the parent-group coefficient collects the B duals, and the copy-row duals
enter separately so the cut stays valid in any same-stage host (the
parent-group part binds to the host's own block when materialized).  Cuts
are shared with every subproblem carrying the theta variable.

Forward passes sample leaf paths without replacement; backward passes are
quick passes over the forward solutions.  The subroutine returns the first
master-level cut violated by the current candidate, or nothing once the
mode's termination rule certifies there is none: exact mode widens the
sample to full coverage and insists on a no-cut round, relaxed mode caps
the rounds and never widens the sample, which keeps every returned bound
a valid relaxation of the aggregated problem.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .aggregate import AggregationMap, GroupKey, PolicyGraph, SubKey, build_policy_graph
from .errors import InfeasiblePolicy, MissingCertificate, MissingDuals, NumericalFailure
from .lp_engine import (INFEASIBLE, OPTIMAL, TIME_LIMIT, CutOracle, DeadlineReached,
                        LpSolution, MipSolution, add_rows, branch_and_cut,
                        infeasibility_lp, solve_lp)
from .model import GE, LpProblem, MipProblem, Msilp
from .tree import path as tree_path

VIOL_GUARD = 1e-9


@dataclass
class SddpConfig:
    eps: float = 1e-6
    k: int | None = None          # sample paths per round; default min(20, leaves)
    exact: bool = True
    max_rounds: int = 3           # relaxed mode only
    seed: int = 0
    theta_lb: float = 0.0         # valid lower bound on every cost-to-go
    time_limit: float | None = None
    mip_gap: float = 1e-6

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass
class Cut:
    owner: SubKey
    kind: str                     # 'optimality' | 'feasibility'
    alpha: np.ndarray             # on the parent's continuous state
    beta_parent: np.ndarray       # on the host's own aggregated block
    rho: dict[GroupKey, np.ndarray]  # copy-row duals, stages >= owner stage
    gamma: float
    gen_x: np.ndarray | None = None
    gen_z: dict[GroupKey, np.ndarray] | None = None
    gen_parent_group: GroupKey | None = None
    gen_value: float = 0.0

    def value_at(self, x_par: np.ndarray, zvals: dict[GroupKey, np.ndarray],
                 host_group: GroupKey) -> float:
        v = self.gamma + float(self.alpha @ x_par)
        v += float(self.beta_parent @ zvals[host_group])
        for g, coef in self.rho.items():
            v += float(coef @ zvals[g])
        return v


@dataclass
class MasterPoint:
    """Decoded master candidate handed to the SDDP subroutine."""

    x_root: np.ndarray
    z: dict[GroupKey, np.ndarray]
    theta: dict[int, float]       # stage-2 node id -> candidate value
    root_group: GroupKey
    serial: int = 0               # distinguishes candidates for solve caching


@dataclass
class MasterLayout:
    z_off: dict[GroupKey, int]
    x_off: int
    y_off: int
    theta: dict[int, int]         # stage-2 node id -> column
    n_cols: int


@dataclass
class SddpResult(MipSolution):
    z_by_group: dict[GroupKey, np.ndarray] | None = None
    cut_counts: dict[str, int] = field(default_factory=dict)
    n_subproblems: int = 0


class _Sub:
    """One policy-graph subproblem and its growing LP."""

    def __init__(self, key: SubKey, engine: "SddpEngine"):
        self.key = key
        self.stage = key[0]
        m = engine.msilp
        self.l = m.l
        self.node0 = engine.pgraph.sub_members[key][0]
        self.data = m.data[self.node0]
        self.group = engine.agg.node_to_group[self.node0]
        self.children = engine.pgraph.children[key]
        self.zeta_groups = [g for g in engine.agg.group_index if g[0] >= self.stage]
        self.zg_off = {g: i * m.l for i, g in enumerate(self.zeta_groups)}

        k, l, r = m.k, m.l, m.r
        nzeta = l * len(self.zeta_groups)
        self.x0 = 0
        self.zeta0 = k
        self.y0 = k + nzeta
        self.theta0 = self.y0 + r
        self.n = self.theta0 + len(self.children)
        self.theta_col = {ck: self.theta0 + i for i, (ck, _) in enumerate(self.children)}

        nd = self.data
        self.nx = nd.f.size
        self.ncopy = nzeta
        self.nlink = nd.b.size
        rows_i, cols, vals, senses = [], [], [], []
        row = 0
        for i in range(self.nx):  # J x >= F x_par + f
            if nd.J is not None:
                s, e = nd.J.indptr[i], nd.J.indptr[i + 1]
                for t in range(s, e):
                    rows_i.append(row); cols.append(self.x0 + nd.J.indices[t])
                    vals.append(nd.J.data[t])
            senses.append(nd.sen_x[i]); row += 1
        for i in range(self.ncopy):  # zeta pinned to the incoming copy
            rows_i.append(row); cols.append(self.zeta0 + i); vals.append(1.0)
            senses.append("E"); row += 1
        own_off = self.zeta0 + self.zg_off[self.group]
        for i in range(self.nlink):
            for mat, off in ((nd.C, self.x0), (nd.D, own_off), (nd.E, self.y0)):
                if mat is None:
                    continue
                s, e = mat.indptr[i], mat.indptr[i + 1]
                for t in range(s, e):
                    rows_i.append(row); cols.append(off + mat.indices[t])
                    vals.append(mat.data[t])
            senses.append(nd.sen_l[i]); row += 1

        c = np.zeros(self.n)
        c[self.x0:self.x0 + k] = nd.d
        c[self.y0:self.y0 + r] = nd.h
        for ck, p in self.children:
            c[self.theta_col[ck]] = p
        lo = np.full(self.n, -np.inf)
        up = np.full(self.n, np.inf)
        lo[self.x0:self.x0 + k] = nd.x_lo
        up[self.x0:self.x0 + k] = nd.x_up
        lo[self.y0:self.y0 + r] = nd.y_lo
        up[self.y0:self.y0 + r] = nd.y_up
        for ck, _ in self.children:
            lo[self.theta_col[ck]] = engine.cfg.theta_lb
        self.lp = LpProblem(
            c=c, A=sp.csr_matrix((vals, (rows_i, cols)), shape=(row, self.n)),
            senses=np.array(senses, dtype="<U1"),
            rhs=np.zeros(row), lo=lo, up=up,
        )
        self.hosted: list[Cut] = []

    def host_row(self, cut: Cut) -> tuple[dict[int, float], str, float]:
        cols: dict[int, float] = {}
        if cut.kind == "optimality":
            cols[self.theta_col[cut.owner]] = 1.0

        def put(off, coefs, sign=-1.0):
            for j, v in enumerate(coefs):
                if v:
                    cols[off + j] = cols.get(off + j, 0.0) + sign * v

        put(self.x0, cut.alpha)
        put(self.zeta0 + self.zg_off[self.group], cut.beta_parent)
        for g, coef in cut.rho.items():
            put(self.zeta0 + self.zg_off[g], coef)
        return cols, GE, cut.gamma

    def add_hosted(self, cut: Cut) -> None:
        add_rows(self.lp, [self.host_row(cut)])
        self.hosted.append(cut)

    def set_rhs(self, x_par: np.ndarray, zvals: dict[GroupKey, np.ndarray],
                parent_group: GroupKey) -> None:
        nd = self.data
        rhs = self.lp.rhs
        if self.nx:
            rhs[:self.nx] = nd.f if nd.F is None else nd.f + nd.F @ x_par
        for g in self.zeta_groups:
            off = self.nx + self.zg_off[g]
            rhs[off:off + self.l] = zvals[g]
        link = nd.b.copy()
        if nd.A is not None:
            link += nd.A @ x_par
        if nd.B is not None:
            link += nd.B @ zvals[parent_group]
        base = self.nx + self.ncopy
        rhs[base:base + self.nlink] = link


@dataclass
class _SubSolution:
    value: float
    x: np.ndarray
    thetas: dict[SubKey, float]
    lp_solution: LpSolution
    x_par: np.ndarray
    zvals: dict[GroupKey, np.ndarray]
    parent_group: GroupKey


class SddpEngine:
    """Shared cut pools and subproblem LPs for one solve."""

    def __init__(self, m: Msilp, agg: AggregationMap, cfg: SddpConfig,
                 pgraph: PolicyGraph | None = None):
        if any(nd.W is not None for nd in m.data):
            raise ValueError("ancestor-coupled rows are not decomposable stagewise; "
                             "use the state-carrying formulation")
        self.msilp = m
        self.agg = agg
        self.cfg = cfg
        self.pgraph = pgraph or build_policy_graph(m.tree, agg)
        self.rng = np.random.default_rng(cfg.seed)
        self.subs = {key: _Sub(key, self) for key in self.pgraph.subproblems}
        self.pools: dict[SubKey, list[Cut]] = {k: [] for k in self.pgraph.subproblems}
        self._pool_sigs: dict[SubKey, set] = {k: set() for k in self.pgraph.subproblems}
        self.master_pool: dict[int, list[Cut]] = {}
        self.visit_log: list[SubKey] = []
        self._memo: dict[tuple, LpSolution] = {}
        self._version = 0  # bumped on every pool change; invalidates the memo
        self._serial = 0
        self._stage2_seen: set = set()
        self.deadline = None if cfg.time_limit is None else \
            time.monotonic() + cfg.time_limit
        tree = m.tree
        self._leaves_under: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for n2 in tree.node(tree.root).children:
            ids = [leaf for leaf in tree.leaves() if self._stage2_ancestor(leaf) == n2]
            w = np.array([tree.node(i).p for i in ids])
            self._leaves_under[n2] = (np.array(ids), w / w.sum())

    def _stage2_ancestor(self, nid: int) -> int:
        node = self.msilp.tree.node(nid)
        while node.stage > 2:
            node = self.msilp.tree.node(node.parent)
        return node.id

    def _check_time(self):
        if self.deadline is not None and time.monotonic() > self.deadline:
            raise DeadlineReached

    # -- cut construction --------------------------------------------------

    def _extract(self, sub: _Sub, duals: np.ndarray):
        nd = sub.data
        pi_x = duals[:sub.nx]
        rho = duals[sub.nx:sub.nx + sub.ncopy]
        pi_l = duals[sub.nx + sub.ncopy:sub.nx + sub.ncopy + sub.nlink]
        alpha = np.zeros(self.msilp.k)
        if nd.F is not None:
            alpha += nd.F.T @ pi_x
        if nd.A is not None:
            alpha += nd.A.T @ pi_l
        beta = nd.B.T @ pi_l if nd.B is not None else np.zeros(self.msilp.l)
        rho_map = {}
        for g in sub.zeta_groups:
            seg = rho[sub.zg_off[g]:sub.zg_off[g] + self.l_]
            if np.any(seg):
                rho_map[g] = seg.copy()
        return alpha, beta, rho_map

    @property
    def l_(self) -> int:
        return self.msilp.l

    def make_optimality_cut(self, sub: _Sub, ss: _SubSolution) -> Cut:
        sol = ss.lp_solution
        if sol.status != OPTIMAL or sol.duals is None:
            raise MissingDuals(f"subproblem {sub.key} not solved to optimality")
        alpha, beta, rho_map = self._extract(sub, sol.duals)
        gamma = ss.value - float(alpha @ ss.x_par) - float(beta @ ss.zvals[ss.parent_group])
        for g, coef in rho_map.items():
            gamma -= float(coef @ ss.zvals[g])
        return Cut(sub.key, "optimality", alpha, beta, rho_map, gamma,
                   gen_x=ss.x_par.copy(),
                   gen_z={g: np.array(v) for g, v in ss.zvals.items()},
                   gen_parent_group=ss.parent_group, gen_value=ss.value)

    def make_feasibility_cut(self, sub: _Sub, x_par, zvals, parent_group) -> Cut:
        """Affine minorant of the subproblem's violation, forced to zero."""
        aux, _ = infeasibility_lp(sub.lp)
        sol = solve_lp(aux, want_farkas=False)
        if sol.status != OPTIMAL:
            raise MissingCertificate(f"phase-1 failed for {sub.key}")
        if sol.objective <= VIOL_GUARD:
            raise MissingCertificate(f"{sub.key} is feasible, no certificate")
        alpha, beta, rho_map = self._extract(sub, sol.duals)
        x_par = np.asarray(x_par, dtype=float)
        gamma = sol.objective - float(alpha @ x_par) - float(beta @ zvals[parent_group])
        for g, coef in rho_map.items():
            gamma -= float(coef @ zvals[g])
        return Cut(sub.key, "feasibility", alpha, beta, rho_map, gamma,
                   gen_x=x_par.copy(), gen_z={g: np.array(v) for g, v in zvals.items()},
                   gen_parent_group=parent_group, gen_value=sol.objective)

    def _cut_signature(self, cut: Cut):
        parts = [cut.kind, round(cut.gamma, 9), tuple(np.round(cut.alpha, 9)),
                 tuple(np.round(cut.beta_parent, 9))]
        for g in sorted(cut.rho):
            parts.append((g, tuple(np.round(cut.rho[g], 9))))
        return tuple(parts)

    def add_cut(self, cut: Cut) -> bool:
        """Store and share a cut with every host; False for an exact duplicate."""
        sig = self._cut_signature(cut)
        if sig in self._pool_sigs[cut.owner]:
            return False
        self._pool_sigs[cut.owner].add(sig)
        self.pools[cut.owner].append(cut)
        for pk in self.pgraph.parents[cut.owner]:
            self.subs[pk].add_hosted(cut)
        self._version += 1
        self._memo.clear()
        return True

    # -- forward / backward ------------------------------------------------

    def solve_sub(self, sub: _Sub, x_par, zvals, parent_group,
                  serial: int = -1) -> LpSolution:
        self._check_time()
        self.visit_log.append(sub.key)
        x_par = np.asarray(x_par, dtype=float)
        key = (sub.key, x_par.tobytes(), parent_group, serial, self._version)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        sub.set_rhs(x_par, zvals, parent_group)
        sol = solve_lp(sub.lp, want_farkas=False)
        if serial >= 0 and sol.status == OPTIMAL:
            self._memo[key] = sol
        return sol

    def sddp_subroutine(self, candidate: MasterPoint, n_child: int,
                        cfg: SddpConfig | None = None) -> Cut | None:
        cfg = cfg or self.cfg
        ids, weights = self._leaves_under[n_child]
        k_default = min(20, ids.size)
        k_cur = min(cfg.k or k_default, ids.size)
        rounds = 0
        self._stage2_seen: set = set()  # non-separating stage-2 cuts, per call
        while True:
            rounds += 1
            if rounds > 100_000:
                raise NumericalFailure("SDDP rounds did not terminate")
            take = min(k_cur, ids.size)
            order = self.rng.choice(ids.size, size=take, replace=False, p=weights)
            cut_added = False
            for leaf in ids[order]:
                node_path = tree_path(self.msilp.tree, int(leaf))[1:]
                sols: dict[int, _SubSolution] = {}
                feas_cut = self._forward(node_path, candidate, sols)
                if feas_cut is not None:
                    if feas_cut.owner[0] == 2:
                        return feas_cut
                    cut_added = True
                    continue
                outcome = self._backward(node_path, candidate, sols)
                if isinstance(outcome, Cut):
                    return outcome
                cut_added = cut_added or outcome
            if cfg.exact:
                if not cut_added:
                    if k_cur >= ids.size:
                        return None
                    k_cur = ids.size
            else:
                if not cut_added or rounds >= cfg.max_rounds:
                    return None

    def _forward(self, node_path, candidate: MasterPoint, sols) -> Cut | None:
        tree = self.msilp.tree
        zvals = candidate.z
        for nid in node_path:
            node = tree.node(nid)
            sub = self.subs[self.pgraph.node_to_sub[nid]]
            if node.stage == 2:
                x_par, pg = candidate.x_root, candidate.root_group
            else:
                prev = sols[node.parent]
                x_par, pg = prev.x, self.agg.node_to_group[node.parent]
            sol = self.solve_sub(sub, x_par, zvals, pg, serial=candidate.serial)
            if sol.status == INFEASIBLE:
                sub.set_rhs(np.asarray(x_par, dtype=float), zvals, pg)
                cut = self.make_feasibility_cut(sub, x_par, zvals, pg)
                self.add_cut(cut)
                return cut
            if sol.status != OPTIMAL:
                raise NumericalFailure(f"subproblem {sub.key}: {sol.status}")
            thetas = {ck: float(sol.x[sub.theta_col[ck]]) for ck, _ in sub.children}
            sols[nid] = _SubSolution(float(sol.objective),
                                     sol.x[:self.msilp.k].copy(), thetas, sol,
                                     np.asarray(x_par, dtype=float), zvals, pg)
        return None

    def _backward(self, node_path, candidate: MasterPoint, sols):
        """Quick pass; returns a violated master Cut, else whether any cut landed."""
        tree = self.msilp.tree
        added = False
        for nid in reversed(node_path):
            node = tree.node(nid)
            sub_key = self.pgraph.node_to_sub[nid]
            ss = sols[nid]
            if node.stage == 2:
                theta_hat = candidate.theta[nid]
            else:
                theta_hat = sols[node.parent].thetas[sub_key]
            if abs(theta_hat - ss.value) < self.cfg.eps * abs(ss.value) + VIOL_GUARD:
                continue
            cut = self.make_optimality_cut(self.subs[sub_key], ss)
            if node.stage == 2:
                cut_val = cut.value_at(candidate.x_root, candidate.z,
                                       candidate.root_group)
                if candidate.theta[nid] < cut_val - VIOL_GUARD:
                    self.master_pool.setdefault(nid, []).append(cut)
                    return cut
                # gap seen but the cut does not separate yet: keep iterating so
                # deeper pools improve instead of accepting a stale candidate;
                # an unchanged regenerated cut marks a fixed point, stop there
                sig = (nid, self._cut_signature(cut))
                if sig not in self._stage2_seen:
                    self._stage2_seen.add(sig)
                    added = True
            else:
                added = self.add_cut(cut) or added
        return added

    def cut_counts(self) -> dict[str, int]:
        return {
            "subproblem_cuts": sum(len(p) for p in self.pools.values()),
            "master_cuts": sum(len(p) for p in self.master_pool.values()),
        }


# -- master problem --------------------------------------------------------


def build_master(m: Msilp, agg: AggregationMap, theta_lb: float = 0.0,
                 with_theta: bool = True) -> tuple[MipProblem, MasterLayout]:
    """First-stage MIP: all aggregated integer blocks, root continuous block,
    one cost-to-go variable per stage-2 node, and every pure-z row."""
    tree = m.tree
    l, k, r = m.l, m.k, m.r
    z_off = {g: i * l for i, g in enumerate(agg.group_index)}
    x_off = l * len(agg.group_index)
    y_off = x_off + k
    theta_cols = {}
    col = y_off + r
    if with_theta and tree.stages > 1:
        for nid in tree.node(tree.root).children:
            theta_cols[nid] = col
            col += 1
    n = col

    obj = np.zeros(n)
    lo = np.full(n, -np.inf)
    up = np.full(n, np.inf)
    integer = np.zeros(n, dtype=bool)
    for node in tree.nodes:
        nd = m.data[node.id]
        zc = z_off[agg.node_to_group[node.id]]
        obj[zc:zc + l] += node.p * nd.c
        lo[zc:zc + l] = np.maximum(lo[zc:zc + l], nd.z_lo)
        up[zc:zc + l] = np.minimum(up[zc:zc + l], nd.z_up)
        integer[zc:zc + l] = True
    root = m.data[tree.root]
    obj[x_off:x_off + k] = root.d
    obj[y_off:y_off + r] = root.h
    lo[x_off:x_off + k] = root.x_lo
    up[x_off:x_off + k] = root.x_up
    lo[y_off:y_off + r] = root.y_lo
    up[y_off:y_off + r] = root.y_up
    for nid, tc in theta_cols.items():
        obj[tc] = tree.node(nid).p_cond
        lo[tc] = theta_lb

    rows_i, cols_j, vals, senses, rhs = [], [], [], [], []
    seen = set()

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

    for node in tree.nodes:
        nd = m.data[node.id]
        zc = z_off[agg.node_to_group[node.id]]
        zp = None if node.parent is None else z_off[agg.node_to_group[node.parent]]
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
    # root state and linking rows live in the master as well
    for i in range(root.f.size):
        cv = {}
        if root.J is not None:
            s, e = root.J.indptr[i], root.J.indptr[i + 1]
            for t in range(s, e):
                cv[x_off + root.J.indices[t]] = root.J.data[t]
        add_row(cv, root.sen_x[i], root.f[i])
    zc_root = z_off[agg.node_to_group[tree.root]]
    for i in range(root.b.size):
        cv = {}
        for mat, off in ((root.C, x_off), (root.D, zc_root), (root.E, y_off)):
            if mat is None:
                continue
            s, e = mat.indptr[i], mat.indptr[i + 1]
            for t in range(s, e):
                c = off + mat.indices[t]
                cv[c] = cv.get(c, 0.0) + mat.data[t]
        add_row(cv, root.sen_l[i], root.b[i])

    prob = MipProblem(
        c=obj, A=sp.csr_matrix((vals, (rows_i, cols_j)), shape=(len(rhs), n)),
        senses=np.array(senses, dtype="<U1"), rhs=np.array(rhs),
        lo=lo, up=up, integer=integer,
    )
    return prob, MasterLayout(z_off, x_off, y_off, theta_cols, n)


def decode_master(m: Msilp, agg: AggregationMap, lay: MasterLayout,
                  x: np.ndarray) -> MasterPoint:
    z = {g: x[off:off + m.l].copy() for g, off in lay.z_off.items()}
    theta = {nid: float(x[tc]) for nid, tc in lay.theta.items()}
    root_group = agg.node_to_group[m.tree.root]
    return MasterPoint(x[lay.x_off:lay.x_off + m.k].copy(), z, theta, root_group)


def master_cut_row(cut: Cut, lay: MasterLayout, m: Msilp, agg: AggregationMap,
                   node_id: int):
    cols: dict[int, float] = {}
    if cut.kind == "optimality":
        cols[lay.theta[node_id]] = 1.0

    def put(off, coefs):
        for j, v in enumerate(coefs):
            if v:
                cols[off + j] = cols.get(off + j, 0.0) - v

    put(lay.x_off, cut.alpha)
    put(lay.z_off[agg.node_to_group[m.tree.root]], cut.beta_parent)
    for g, coef in cut.rho.items():
        put(lay.z_off[g], coef)
    return cols, GE, cut.gamma


class _MasterOracle(CutOracle):
    """Algorithm wiring: one SDDP call per stage-2 node, all violated cuts
    returned together, caller re-solves and calls again until clean."""

    def __init__(self, engine: SddpEngine, lay: MasterLayout):
        self.engine = engine
        self.lay = lay

    def separate(self, x: np.ndarray):
        eng = self.engine
        cand = decode_master(eng.msilp, eng.agg, self.lay, x)
        eng._serial += 1
        cand.serial = eng._serial
        rows = []
        for nid in eng.msilp.tree.node(eng.msilp.tree.root).children:
            cut = eng.sddp_subroutine(cand, nid)
            if cut is not None:
                rows.append(master_cut_row(cut, self.lay, eng.msilp, eng.agg, nid))
        return rows


def _root_precut(master: MipProblem, oracle: "_MasterOracle",
                 max_iters: int = 500) -> None:
    """Cut loop on the LP relaxation before branching starts.

    Cut validity never uses integrality of the candidate, so separating at
    the relaxation optimum is sound; it just front-loads pool growth so the
    branch-and-bound candidates start out well approximated.
    """
    relax = LpProblem(c=master.c, A=master.A, senses=master.senses,
                      rhs=master.rhs, lo=master.lo, up=master.up)
    for _ in range(max_iters):
        sol = solve_lp(relax, want_farkas=False)
        if sol.status != OPTIMAL:
            return
        rows = oracle.separate(sol.x)
        if not rows:
            return
        add_rows(master, rows)
        relax.A, relax.senses, relax.rhs = master.A, master.senses, master.rhs


def _as_result(sol: MipSolution, m: Msilp, agg: AggregationMap,
               lay: MasterLayout, engine: SddpEngine | None) -> SddpResult:
    res = SddpResult(status=sol.status, x=sol.x, objective=sol.objective,
                     bound=sol.bound, gap=sol.gap, nodes=sol.nodes, cuts=sol.cuts)
    if sol.x is not None:
        res.z_by_group = {g: sol.x[off:off + m.l].copy()
                          for g, off in lay.z_off.items()}
    if engine is not None:
        res.cut_counts = engine.cut_counts()
        res.n_subproblems = len(engine.subs)
    return res


def solve_exact(m: Msilp, agg: AggregationMap, cfg: SddpConfig | None = None) -> SddpResult:
    """Exact optimum of the aggregated problem via branch-and-cut + SDDP."""
    cfg = cfg or SddpConfig()
    master, lay = build_master(m, agg, cfg.theta_lb)
    if m.tree.stages == 1:
        sol = branch_and_cut(master, time_limit=cfg.time_limit, rel_gap=cfg.mip_gap)
        return _as_result(sol, m, agg, lay, None)
    engine = SddpEngine(m, agg, cfg)
    oracle = _MasterOracle(engine, lay)
    try:
        _root_precut(master, oracle)
    except DeadlineReached:
        pass
    sol = branch_and_cut(master, oracle, time_limit=cfg.time_limit,
                         rel_gap=cfg.mip_gap, round_heuristic=False)
    return _as_result(sol, m, agg, lay, engine)


def solve_lower_bound(m: Msilp, agg: AggregationMap,
                      cfg: SddpConfig | None = None) -> tuple[float, SddpResult]:
    """Relaxed-termination bound plus the incumbent first-stage candidate.

    The returned bound never exceeds the aggregated optimum: every cut is a
    valid underestimator and the relaxed run only leaves cuts out.
    """
    cfg = cfg or SddpConfig(eps=0.1, exact=False)
    if cfg.exact:
        cfg = SddpConfig(eps=cfg.eps, k=cfg.k, exact=False, max_rounds=cfg.max_rounds,
                         seed=cfg.seed, theta_lb=cfg.theta_lb,
                         time_limit=cfg.time_limit, mip_gap=cfg.mip_gap)
    master, lay = build_master(m, agg, cfg.theta_lb)
    if m.tree.stages == 1:
        sol = branch_and_cut(master, time_limit=cfg.time_limit, rel_gap=cfg.mip_gap)
        res = _as_result(sol, m, agg, lay, None)
        return float(sol.bound), res
    engine = SddpEngine(m, agg, cfg)
    oracle = _MasterOracle(engine, lay)
    try:
        _root_precut(master, oracle)
    except DeadlineReached:
        pass
    sol = branch_and_cut(master, oracle, time_limit=cfg.time_limit,
                         rel_gap=cfg.mip_gap, round_heuristic=False)
    res = _as_result(sol, m, agg, lay, engine)
    bound = sol.bound if sol.bound is not None else cfg.theta_lb
    return float(bound), res


def evaluate_policy(m: Msilp, agg: AggregationMap, z_hat: dict[GroupKey, np.ndarray],
                    cfg: SddpConfig | None = None) -> float:
    """Exact objective of a fixed aggregated integer policy (upper bound).

    Convergence is driven by the absolute violation guard (eps vanishing):
    a meaningful relative tolerance would let every cost-to-go variable
    settle a relative notch below its true value, compounding across
    stages."""
    base = cfg or SddpConfig()
    cfg = SddpConfig(eps=1e-15, k=base.k, exact=True,
                     max_rounds=base.max_rounds, seed=base.seed,
                     theta_lb=base.theta_lb, time_limit=base.time_limit,
                     mip_gap=base.mip_gap)
    master, lay = build_master(m, agg, cfg.theta_lb)
    for g, off in lay.z_off.items():
        vals = np.asarray(z_hat[g], dtype=float)
        master.lo[off:off + m.l] = vals
        master.up[off:off + m.l] = vals
    if m.tree.stages == 1:
        sol = branch_and_cut(master, time_limit=cfg.time_limit, rel_gap=cfg.mip_gap)
    else:
        engine = SddpEngine(m, agg, cfg)
        oracle = _MasterOracle(engine, lay)
        try:
            _root_precut(master, oracle)
        except DeadlineReached:
            pass
        sol = branch_and_cut(master, oracle, time_limit=cfg.time_limit,
                             rel_gap=cfg.mip_gap, round_heuristic=False)
    if sol.status == INFEASIBLE:
        raise InfeasiblePolicy("no feasible continuous completion for the fixed policy")
    if sol.status == TIME_LIMIT or sol.objective is None:
        raise NumericalFailure("policy evaluation hit the time limit")
    return float(sol.objective)
