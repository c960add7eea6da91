"""Generic multi-stage node data and extensive-form MILP assembly.

Per-node constraint blocks, all rows normalized to sense '>= ' or '==':

    z-rows:    H z_n           {>=,==}  G z_parent + g
    x-rows:    J x_n           {>=,==}  F x_parent + f
    linking:   C x_n + D z_n + E y_n
                               {>=,==}  A x_parent + B z_parent
                                        + W sum(z_ancestors incl. parent) + b

W is an optional ancestor-coupling block used by formulations that fold a
telescoped state recursion into the integer variables; it is only legal
when the integer variables are first-stage (extensive or two-stage use).

The extensive-form builders share one variable layout object so that
solutions can be decoded and cross-checked between the plain and the
aggregated forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .aggregate import AggregationMap
from .errors import DimensionMismatch, Overflow
from .tree import ScenarioTree, path

DROP_TOL = 1e-12
VAR_CAP = 5_000_000

GE, EQ, LE = "G", "E", "L"


def smat(m, shape) -> sp.csr_matrix | None:
    """Normalize a matrix argument to csr, or None when empty/zero."""
    if m is None:
        return None
    m = sp.csr_matrix(m)
    if m.shape != shape:
        raise DimensionMismatch(f"expected {shape}, got {m.shape}")
    m.eliminate_zeros()
    return m if m.nnz else None


@dataclass
class NodeData:
    """Matrices, vectors and bounds of one scenario-tree node."""

    # z-rows
    H: sp.csr_matrix | None = None
    G: sp.csr_matrix | None = None
    g: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sen_z: np.ndarray = field(default_factory=lambda: np.empty(0, dtype="<U1"))
    # x-rows
    J: sp.csr_matrix | None = None
    F: sp.csr_matrix | None = None
    f: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sen_x: np.ndarray = field(default_factory=lambda: np.empty(0, dtype="<U1"))
    # linking rows
    C: sp.csr_matrix | None = None
    D: sp.csr_matrix | None = None
    E: sp.csr_matrix | None = None
    A: sp.csr_matrix | None = None
    B: sp.csr_matrix | None = None
    W: sp.csr_matrix | None = None
    b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sen_l: np.ndarray = field(default_factory=lambda: np.empty(0, dtype="<U1"))
    # costs
    c: np.ndarray = field(default_factory=lambda: np.zeros(0))  # on z
    d: np.ndarray = field(default_factory=lambda: np.zeros(0))  # on x
    h: np.ndarray = field(default_factory=lambda: np.zeros(0))  # on y
    # bounds
    x_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_up: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_up: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_up: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def signature(self) -> bytes:
        """Content hash used by the MC-measurability check."""
        import hashlib

        hsh = hashlib.sha256()
        for m in (self.H, self.G, self.J, self.F, self.C, self.D, self.E,
                  self.A, self.B, self.W):
            if m is None:
                hsh.update(b"-")
            else:
                coo = m.tocoo()
                hsh.update(np.asarray(coo.row).tobytes())
                hsh.update(np.asarray(coo.col).tobytes())
                hsh.update(np.round(coo.data, 12).tobytes())
        for v in (self.g, self.f, self.b, self.c, self.d, self.h,
                  self.x_lo, self.x_up, self.y_lo, self.y_up, self.z_lo, self.z_up):
            hsh.update(np.round(np.asarray(v, dtype=float), 12).tobytes())
        for s in (self.sen_z, self.sen_x, self.sen_l):
            hsh.update("".join(s).encode())
        return hsh.digest()


@dataclass
class Msilp:
    """A scenario tree plus per-node data with fixed dimensions (k, l, r)."""

    tree: ScenarioTree
    data: list[NodeData]
    k: int
    l: int
    r: int
    name: str = ""
    basis_rows: np.ndarray | None = None  # linking-row indices whose rhs is the LDR basis

    def node_data(self, nid: int) -> NodeData:
        return self.data[nid]


@dataclass
class LpProblem:
    c: np.ndarray
    A: sp.csr_matrix
    senses: np.ndarray  # 'G' / 'E' / 'L' per row
    rhs: np.ndarray
    lo: np.ndarray
    up: np.ndarray

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.rhs.size


@dataclass
class MipProblem(LpProblem):
    integer: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


@dataclass
class Layout:
    """Column offsets of an extensive form: z blocks, then x and y per node."""

    z_off: dict = field(default_factory=dict)  # node id or group key -> column
    x_off: dict[int, int] = field(default_factory=dict)
    y_off: dict[int, int] = field(default_factory=dict)
    n_cols: int = 0
    aggregated: bool = False


class _RowBuilder:
    """Accumulates sparse rows, dropping tiny coefficients and duplicates."""

    def __init__(self, dedup: bool = False):
        self.rows_i: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.rhs: list[float] = []
        self.senses: list[str] = []
        self._dedup = dedup
        self._seen: set = set()
        self._cur: dict[int, float] = {}

    def add(self, cols_vals: dict[int, float], sense: str, rhs: float,
            dedup: bool = False) -> None:
        entries = tuple(sorted((c, round(v, 12)) for c, v in cols_vals.items()
                               if abs(v) > DROP_TOL))
        if dedup and self._dedup:
            sig = (sense, round(rhs, 12), entries)
            if sig in self._seen:
                return
            self._seen.add(sig)
        i = len(self.rhs)
        for c, v in entries:
            self.rows_i.append(i)
            self.cols.append(c)
            self.vals.append(v)
        self.rhs.append(rhs)
        self.senses.append(sense)

    def matrix(self, n_cols: int) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.vals, (self.rows_i, self.cols)), shape=(len(self.rhs), n_cols)
        )


def _accumulate(target: dict[int, float], mat: sp.csr_matrix | None, row: int,
                offset: int, sign: float = 1.0) -> None:
    if mat is None:
        return
    start, end = mat.indptr[row], mat.indptr[row + 1]
    for idx in range(start, end):
        col = offset + mat.indices[idx]
        target[col] = target.get(col, 0.0) + sign * mat.data[idx]


def _make_layout(m: Msilp, agg: AggregationMap | None, cap: int) -> Layout:
    lay = Layout(aggregated=agg is not None)
    col = 0
    if agg is None:
        for node in m.tree.nodes:
            lay.z_off[node.id] = col
            col += m.l
    else:
        for key in agg.group_index:
            lay.z_off[key] = col
            col += m.l
    for node in m.tree.nodes:
        lay.x_off[node.id] = col
        col += m.k
    for node in m.tree.nodes:
        lay.y_off[node.id] = col
        col += m.r
    if col > cap:
        raise Overflow(f"extensive form needs {col} columns, cap is {cap}")
    lay.n_cols = col
    return lay


def _zcol(lay: Layout, agg: AggregationMap | None, nid: int) -> int:
    if agg is None:
        return lay.z_off[nid]
    return lay.z_off[agg.node_to_group[nid]]


def _build_form(m: Msilp, agg: AggregationMap | None, cap: int) -> MipProblem:
    tree = m.tree
    lay = _make_layout(m, agg, cap)
    rows = _RowBuilder(dedup=agg is not None)
    obj = np.zeros(lay.n_cols)
    lo = np.full(lay.n_cols, -np.inf)
    up = np.full(lay.n_cols, np.inf)
    integer = np.zeros(lay.n_cols, dtype=bool)

    for node in tree.nodes:
        nd = m.data[node.id]
        zc, xc, yc = _zcol(lay, agg, node.id), lay.x_off[node.id], lay.y_off[node.id]
        par = node.parent
        zp = None if par is None else _zcol(lay, agg, par)
        xp = None if par is None else lay.x_off[par]

        obj[xc:xc + m.k] += node.p * nd.d
        obj[yc:yc + m.r] += node.p * nd.h
        obj[zc:zc + m.l] += node.p * nd.c
        lo[xc:xc + m.k] = nd.x_lo
        up[xc:xc + m.k] = nd.x_up
        lo[yc:yc + m.r] = nd.y_lo
        up[yc:yc + m.r] = nd.y_up
        # shared z blocks keep the tightest bounds over their member nodes
        lo[zc:zc + m.l] = np.maximum(lo[zc:zc + m.l], nd.z_lo)
        up[zc:zc + m.l] = np.minimum(up[zc:zc + m.l], nd.z_up)
        integer[zc:zc + m.l] = True

        if nd.H is not None or nd.g.size:
            for i in range(nd.g.size):
                cv: dict[int, float] = {}
                _accumulate(cv, nd.H, i, zc)
                if zp is not None:
                    _accumulate(cv, nd.G, i, zp, -1.0)
                rows.add(cv, nd.sen_z[i], nd.g[i], dedup=True)
        for i in range(nd.f.size):
            cv = {}
            _accumulate(cv, nd.J, i, xc)
            if xp is not None:
                _accumulate(cv, nd.F, i, xp, -1.0)
            rows.add(cv, nd.sen_x[i], nd.f[i])
        ancestors = path(tree, node.id)[:-1] if nd.W is not None else []
        for i in range(nd.b.size):
            cv = {}
            _accumulate(cv, nd.C, i, xc)
            _accumulate(cv, nd.D, i, zc)
            _accumulate(cv, nd.E, i, yc)
            if xp is not None:
                _accumulate(cv, nd.A, i, xp, -1.0)
            if zp is not None:
                _accumulate(cv, nd.B, i, zp, -1.0)
            for anc in ancestors:
                _accumulate(cv, nd.W, i, _zcol(lay, agg, anc), -1.0)
            rows.add(cv, nd.sen_l[i], nd.b[i])

    prob = MipProblem(
        c=obj, A=rows.matrix(lay.n_cols),
        senses=np.array(rows.senses, dtype="<U1"),
        rhs=np.array(rows.rhs), lo=lo, up=up, integer=integer,
    )
    prob.layout = lay
    return prob


def build_extensive_form(m: Msilp, cap: int = VAR_CAP) -> MipProblem:
    """One (x, y, z) block per node; optimal value is the true optimum."""
    return _build_form(m, None, cap)


def build_aggregated_extensive_form(m: Msilp, agg: AggregationMap,
                                    cap: int = VAR_CAP) -> MipProblem:
    """Integer blocks shared per aggregation group; duplicate z-rows coalesced."""
    return _build_form(m, agg, cap)


def expand_aggregated_solution(m: Msilp, agg: AggregationMap, prob_agg: MipProblem,
                               x_agg: np.ndarray, prob_plain: MipProblem) -> np.ndarray:
    """Lift an aggregated-form solution to the plain form (z_n := z of its group)."""
    la, lp_ = prob_agg.layout, prob_plain.layout
    out = np.zeros(prob_plain.n)
    for node in m.tree.nodes:
        ga = la.z_off[agg.node_to_group[node.id]]
        out[lp_.z_off[node.id]:lp_.z_off[node.id] + m.l] = x_agg[ga:ga + m.l]
        out[lp_.x_off[node.id]:lp_.x_off[node.id] + m.k] = \
            x_agg[la.x_off[node.id]:la.x_off[node.id] + m.k]
        out[lp_.y_off[node.id]:lp_.y_off[node.id] + m.r] = \
            x_agg[la.y_off[node.id]:la.y_off[node.id] + m.r]
    return out


def max_violation(p: LpProblem, x: np.ndarray) -> float:
    """Worst constraint/bound violation of x; <= tol means feasible."""
    act = p.A @ x
    v = 0.0
    for i in range(p.m):
        if p.senses[i] == GE:
            v = max(v, p.rhs[i] - act[i])
        elif p.senses[i] == LE:
            v = max(v, act[i] - p.rhs[i])
        else:
            v = max(v, abs(act[i] - p.rhs[i]))
    with np.errstate(invalid="ignore"):
        v = max(v, np.max(np.where(np.isfinite(p.lo), p.lo - x, 0.0), initial=0.0))
        v = max(v, np.max(np.where(np.isfinite(p.up), x - p.up, 0.0), initial=0.0))
    return float(v)


def validate(m: Msilp) -> list[str]:
    """All NodeData invariant violations; empty list iff the instance is valid."""
    diags: list[str] = []
    if len(m.data) != len(m.tree):
        diags.append(f"data defined for {len(m.data)} nodes, tree has {len(m.tree)}")
        return diags

    def _chk(nid, mat, name, shape):
        if mat is not None and mat.shape != shape:
            diags.append(f"node {nid}: {name} has shape {mat.shape}, expected {shape}")

    for node in m.tree.nodes:
        nd = m.data[node.id]
        nz, nx, nl = nd.g.size, nd.f.size, nd.b.size
        _chk(node.id, nd.H, "H", (nz, m.l))
        _chk(node.id, nd.G, "G", (nz, m.l))
        _chk(node.id, nd.J, "J", (nx, m.k))
        _chk(node.id, nd.F, "F", (nx, m.k))
        _chk(node.id, nd.C, "C", (nl, m.k))
        _chk(node.id, nd.D, "D", (nl, m.l))
        _chk(node.id, nd.E, "E", (nl, m.r))
        _chk(node.id, nd.A, "A", (nl, m.k))
        _chk(node.id, nd.B, "B", (nl, m.l))
        _chk(node.id, nd.W, "W", (nl, m.l))
        for vec, size, name in ((nd.c, m.l, "c"), (nd.d, m.k, "d"), (nd.h, m.r, "h"),
                                (nd.x_lo, m.k, "x_lo"), (nd.x_up, m.k, "x_up"),
                                (nd.y_lo, m.r, "y_lo"), (nd.y_up, m.r, "y_up"),
                                (nd.z_lo, m.l, "z_lo"), (nd.z_up, m.l, "z_up")):
            if np.asarray(vec).size != size:
                diags.append(f"node {node.id}: {name} has length {np.asarray(vec).size},"
                             f" expected {size}")
        for sen, size, name in ((nd.sen_z, nz, "sen_z"), (nd.sen_x, nx, "sen_x"),
                                (nd.sen_l, nl, "sen_l")):
            if sen.size != size:
                diags.append(f"node {node.id}: {name} has length {sen.size}, expected {size}")
        if node.parent is None:
            for mat, name in ((nd.A, "A"), (nd.B, "B"), (nd.F, "F"), (nd.G, "G"),
                              (nd.W, "W")):
                if mat is not None:
                    diags.append(f"root carries parent-coupling block {name}")
        if not (np.all(np.isfinite(nd.z_lo)) and np.all(np.isfinite(nd.z_up))):
            diags.append(f"node {node.id}: unbounded integer column")

    by_state: dict[tuple, bytes] = {}
    for node in m.tree.nodes:
        key = (node.stage, node.mc_state.attrs)
        sig = m.data[node.id].signature()
        if key in by_state and by_state[key] != sig:
            diags.append(f"MC-measurability violated at stage {node.stage},"
                         f" state {node.mc_state.attrs}")
        by_state.setdefault(key, sig)
    return diags


def write_lp_text(p: LpProblem, fp) -> None:
    """Human-readable LP dump (own dialect, re-readable by read_lp_text)."""

    def term(v, j):
        return f"{'+' if v >= 0 else '-'} {abs(v):.17g} x{j} "

    fp.write("minimize\n obj: ")
    fp.write("".join(term(v, j) for j, v in enumerate(p.c) if v != 0.0) or "0")
    fp.write("\nsubject to\n")
    acsr = p.A.tocsr()
    op = {GE: ">=", LE: "<=", EQ: "="}
    for i in range(p.m):
        s, e = acsr.indptr[i], acsr.indptr[i + 1]
        body = "".join(term(acsr.data[t], acsr.indices[t]) for t in range(s, e)) or "0 "
        fp.write(f" r{i}: {body}{op[p.senses[i]]} {p.rhs[i]:.17g}\n")
    fp.write("bounds\n")
    for j in range(p.n):
        lo = "-inf" if not np.isfinite(p.lo[j]) else f"{p.lo[j]:.17g}"
        hi = "+inf" if not np.isfinite(p.up[j]) else f"{p.up[j]:.17g}"
        fp.write(f" {lo} <= x{j} <= {hi}\n")
    if isinstance(p, MipProblem) and p.integer.any():
        fp.write("general\n " + " ".join(f"x{j}" for j in np.flatnonzero(p.integer)) + "\n")
    fp.write("end\n")


def read_lp_text(fp) -> MipProblem:
    """Parse the dialect written by write_lp_text."""
    import re

    text = fp.read()
    sec_obj = re.search(r"minimize\s+obj:(.*?)subject to", text, re.S).group(1)
    sec_rows = re.search(r"subject to(.*?)bounds", text, re.S).group(1)
    sec_bounds = re.search(r"bounds(.*?)(general|end)", text, re.S).group(1)
    sec_int = re.search(r"general(.*?)end", text, re.S)

    term_re = re.compile(r"([+-])\s*([\d.eE+-]+)\s*x(\d+)")

    def parse_terms(s):
        return [(int(j), float(f"{sg}{v}")) for sg, v, j in term_re.findall(s)]

    n = 0
    obj_terms = parse_terms(sec_obj)
    rows = []
    for line in sec_rows.strip().splitlines():
        body = line.split(":", 1)[1]
        mm = re.search(r"(>=|<=|=)\s*([\d.eE+-]+)\s*$", body)
        sense = {">=": GE, "<=": LE, "=": EQ}[mm.group(1)]
        rhs = float(mm.group(2))
        terms = parse_terms(body[:mm.start()])
        rows.append((terms, sense, rhs))
        n = max([n] + [j + 1 for j, _ in terms])
    n = max([n] + [j + 1 for j, _ in obj_terms])
    bounds = []
    for line in sec_bounds.strip().splitlines():
        lo_s, rest = line.strip().split("<=", 1)
        _, hi_s = rest.strip().split("<=", 1)
        bounds.append((float(lo_s) if "inf" not in lo_s else -np.inf,
                       float(hi_s) if "inf" not in hi_s else np.inf))
    n = max(n, len(bounds))
    c = np.zeros(n)
    for j, v in obj_terms:
        c[j] = v
    ri, ci, vv, rhs_l, sen_l = [], [], [], [], []
    for i, (terms, sense, rhs) in enumerate(rows):
        for j, v in terms:
            ri.append(i)
            ci.append(j)
            vv.append(v)
        rhs_l.append(rhs)
        sen_l.append(sense)
    lo = np.array([b[0] for b in bounds]) if bounds else np.full(n, -np.inf)
    up = np.array([b[1] for b in bounds]) if bounds else np.full(n, np.inf)
    integer = np.zeros(n, dtype=bool)
    if sec_int:
        for tok in sec_int.group(1).split():
            integer[int(tok[1:])] = True
    return MipProblem(
        c=c, A=sp.csr_matrix((vv, (ri, ci)), shape=(len(rows), n)),
        senses=np.array(sen_l, dtype="<U1"), rhs=np.array(rhs_l),
        lo=lo, up=up, integer=integer,
    )
