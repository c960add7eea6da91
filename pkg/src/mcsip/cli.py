"""Command line: instance generation, solving, evaluation, benchmarking.

Subcommands: generate, solve, evaluate, bench, report.  Bench emits a CSV
whose body is reproducible byte-for-byte for fixed seeds; wall-clock times
go to a sidecar file so timing noise never touches the report body.
Exit codes: 0 success, 2 partial failure (some bench cells errored),
3 bad configuration.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
import time

import numpy as np

from .aggregate import Transformation, build_aggregation
from .errors import ConfigError, McsipError
from .hdr import HdrConfig, generate_instance, load_instance, save_instance, \
    build_hdr_aggregated, build_hdr_msilp
from .ldr import LdrVariant, benders_solve, build_ldr_model, extract_policy
from .lp_engine import branch_and_cut
from .model import build_aggregated_extensive_form
from .sddp import SddpConfig, evaluate_policy, solve_exact, solve_lower_bound

METHODS = ("ex", "sddp", "sddp-lb", "sddp-ub", "ldr-th", "ldr-t", "ldr-m")
TRANSFORMS = ("hn", "ma", "mm", "pm", "fh")
OUT_DIR_ENV = "MCSIP_OUT_DIR"
REPORT_COLUMNS = ["instance", "method", "transform", "seed", "status",
                  "objective", "bound", "gap", "cuts", "error"]


def gap_closed(obj_hn: float, obj_i: float, obj_fh: float) -> float | None:
    """Percentage of the stage-only-to-full-history gap closed by a policy.

    None flags a degenerate denominator (stage-only already optimal)."""
    if obj_hn < obj_fh - 1e-6:
        raise ValueError("stage-only objective below the full-history optimum")
    den = obj_hn - obj_fh
    if abs(den) <= 1e-9:
        return None
    return 100.0 * (obj_hn - obj_i) / den


def relative_difference(obj_ref: float, obj_i: float) -> float:
    if obj_ref == 0:
        raise ValueError("reference objective is zero")
    return 100.0 * abs(obj_ref - obj_i) / obj_ref


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        cols, rows = text.lower().split("x")
        return int(cols), int(rows)
    except Exception as exc:
        raise ConfigError(f"bad grid {text!r}, expected COLSxROWS") from exc


def _transformation(name: str, pm_attrs: list[int] | None) -> Transformation:
    if name not in TRANSFORMS:
        raise ConfigError(f"unknown transform {name!r}")
    if name == "pm":
        attrs = tuple(pm_attrs) if pm_attrs else (2,)
        return Transformation("pm", partial_attrs=attrs)
    return Transformation(name)


def _group_key_to_json(key) -> list:
    return list(key)


def run_solve(inst, method: str, tr: Transformation, *, eps: float | None,
              k: int | None, seed: int, time_limit: float | None,
              rounds: int) -> dict:
    """One (instance, method, transform) cell; returns the solution record."""
    t0 = time.monotonic()
    out: dict = {"method": method, "transform": tr.kind, "seed": seed}
    if method in ("ex", "sddp", "sddp-lb", "sddp-ub"):
        m = build_hdr_msilp(inst)
        agg = build_aggregation(m.tree, tr)
        if method == "ex":
            prob = build_aggregated_extensive_form(m, agg)
            sol = branch_and_cut(prob, time_limit=time_limit)
            lay = prob.layout
            z = {g: sol.x[lay.z_off[g]:lay.z_off[g] + m.l] for g in agg.group_index} \
                if sol.x is not None else None
            out.update(status=sol.status, objective=sol.objective, bound=sol.bound,
                       gap=sol.gap, cuts=0)
        else:
            cfg = SddpConfig(eps=eps if eps is not None else
                             (0.1 if method in ("sddp-lb", "sddp-ub") else 1e-6),
                             k=k, exact=(method == "sddp"), seed=seed,
                             time_limit=time_limit, max_rounds=rounds)
            if method == "sddp":
                res = solve_exact(m, agg, cfg)
                z = res.z_by_group
                out.update(status=res.status, objective=res.objective,
                           bound=res.bound, gap=res.gap,
                           cuts=sum(res.cut_counts.values()))
            else:
                bound, res = solve_lower_bound(m, agg, cfg)
                z = res.z_by_group
                out.update(status=res.status, bound=bound,
                           cuts=sum(res.cut_counts.values()))
                if method == "sddp-lb":
                    out.update(objective=res.objective, gap=res.gap)
                else:  # sddp-ub: exact evaluation of the incumbent policy
                    if z is None:
                        raise McsipError("lower-bound run produced no incumbent")
                    val = evaluate_policy(m, agg, z, cfg)
                    out.update(objective=val,
                               gap=(val - bound) / max(abs(val), 1e-9))
        if z is not None:
            out["z"] = [[_group_key_to_json(g), list(map(float, v))]
                        for g, v in sorted(z.items())]
    elif method in ("ldr-th", "ldr-t", "ldr-m"):
        m0 = build_hdr_msilp(inst)
        agg0 = build_aggregation(m0.tree, tr)
        ma = build_hdr_aggregated(inst, agg0)
        agg = build_aggregation(ma.tree, tr)
        model = build_ldr_model(ma, agg, LdrVariant(method.split("-")[1]))
        sol = benders_solve(model, eps=eps if eps is not None else 1e-6,
                            time_limit=time_limit)
        out.update(status=sol.status, objective=sol.objective, bound=sol.bound,
                   gap=sol.gap, cuts=sol.cut_count)
        if sol.x is not None:
            x_by_node, z = extract_policy(model, sol)
            out["z"] = [[_group_key_to_json(g), list(map(float, v))]
                        for g, v in sorted(z.items())]
            out["lam"] = [[list(key), v.tolist()] for key, v in sorted(sol.lam.items())]
            out["x_nodes"] = np.round(x_by_node, 9).tolist()
    else:
        raise ConfigError(f"unknown method {method!r}")
    out["wall_time"] = time.monotonic() - t0
    return out


def _out_path(name: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    base = os.environ.get(OUT_DIR_ENV, ".")
    os.makedirs(base, exist_ok=True)
    return os.path.join(base, name)


def cmd_generate(args) -> int:
    cols, rows = _parse_grid(args.grid)
    cfg = HdrConfig(cols=cols, rows=rows, capacity_pct=args.capacity_pct,
                    modality_type=args.modality_type, seed=args.seed)
    inst = generate_instance(cfg)
    path = _out_path(f"hdr_{args.grid}_s{args.seed}.json", args.out)
    with open(path, "w") as fp:
        save_instance(inst, fp)
    print(f"wrote {path}: {inst.n_shelters} shelters, {inst.n_dcs} DCs, "
          f"{inst.n_modalities} modalities, T={cfg.T}")
    return 0


def cmd_solve(args) -> int:
    with open(args.instance) as fp:
        inst = load_instance(fp)
    tr = _transformation(args.transform, args.pm_attrs)
    rec = run_solve(inst, args.method, tr, eps=args.eps, k=args.k,
                    seed=args.seed, time_limit=args.time_limit,
                    rounds=args.rounds)
    rec["instance"] = args.instance
    path = _out_path(f"sol_{args.method}_{args.transform}.json", args.out)
    with open(path, "w") as fp:
        json.dump(rec, fp, indent=1, sort_keys=True)
    print(f"{args.method}/{args.transform}: status={rec.get('status')} "
          f"objective={_fmt(rec.get('objective'))} bound={_fmt(rec.get('bound'))} "
          f"({rec['wall_time']:.2f}s) -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    with open(args.instance) as fp:
        inst = load_instance(fp)
    with open(args.solution) as fp:
        sol = json.load(fp)
    tr = _transformation(args.transform or sol["transform"], args.pm_attrs)
    m = build_hdr_msilp(inst)
    agg = build_aggregation(m.tree, tr)
    z = {tuple(key): np.array(vals) for key, vals in sol["z"]}
    val = evaluate_policy(m, agg, z, SddpConfig(seed=args.seed))
    print(f"exact policy value: {_fmt(val)}")
    if args.out:
        with open(args.out, "w") as fp:
            json.dump({"objective": val, "solution": args.solution}, fp)
    return 0


def _bench_cell(spec: dict) -> dict:
    try:
        if "path" in spec["instance"]:
            with open(spec["instance"]["path"]) as fp:
                inst = load_instance(fp)
        else:
            cols, rows = _parse_grid(spec["instance"]["grid"])
            cfg = HdrConfig(cols=cols, rows=rows,
                            capacity_pct=spec["instance"].get("capacity_pct", 0.25),
                            modality_type=spec["instance"].get("modality_type", 1),
                            seed=spec["instance"].get("seed", 0))
            inst = generate_instance(cfg)
        tr = _transformation(spec["transform"], spec.get("pm_attrs"))
        rec = run_solve(inst, spec["method"], tr, eps=spec.get("eps"),
                        k=spec.get("k"), seed=spec.get("seed", 0),
                        time_limit=spec.get("time_limit"),
                        rounds=spec.get("rounds", 3))
        rec["instance"] = spec["instance"].get("id", "?")
        rec["error"] = ""
        return rec
    except Exception as exc:  # per-cell error, the run continues
        return {"instance": spec["instance"].get("id", "?"),
                "method": spec["method"], "transform": spec["transform"],
                "seed": spec.get("seed", 0), "status": "error",
                "error": f"{type(exc).__name__}: {exc}", "wall_time": 0.0}


def cmd_bench(args) -> int:
    try:
        with open(args.config) as fp:
            conf = json.load(fp)
        instances = conf["instances"]
        methods = conf.get("methods", [])
        transforms = conf.get("transforms", ["hn"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    cells = []
    for inst_spec in instances:
        for method in methods:
            for tr in transforms:
                cells.append({"instance": inst_spec, "method": method,
                              "transform": tr, "pm_attrs": conf.get("pm_attrs"),
                              "eps": conf.get("eps"), "k": conf.get("k"),
                              "seed": conf.get("seed", 0),
                              "time_limit": conf.get("time_limit"),
                              "rounds": conf.get("rounds", 3)})
    if args.jobs > 1 and cells:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_bench_cell, cells))
    else:
        results = [_bench_cell(c) for c in cells]
    results.sort(key=lambda r: (str(r.get("instance")), r.get("method", ""),
                                r.get("transform", "")))
    path = _out_path("report.csv", args.out)
    times_path = path + ".times.csv"
    with open(path, "w", newline="") as fp, open(times_path, "w", newline="") as tfp:
        w = csv.writer(fp)
        tw = csv.writer(tfp)
        w.writerow(REPORT_COLUMNS)
        tw.writerow(["instance", "method", "transform", "wall_time"])
        for rec in results:
            w.writerow([_fmt(rec.get(c)) for c in REPORT_COLUMNS])
            fp.flush()
            tw.writerow([rec.get("instance"), rec.get("method"),
                         rec.get("transform"), f"{rec.get('wall_time', 0.0):.3f}"])
    failed = sum(1 for r in results if r.get("status") == "error")
    print(f"wrote {path} ({len(results)} rows, {failed} failed)")
    return 2 if failed else 0


def cmd_report(args) -> int:
    with open(args.input) as fp:
        rows = list(csv.DictReader(fp))
    by_inst: dict[str, dict[tuple[str, str], float]] = {}
    for row in rows:
        if row["status"] in ("optimal",) and row["objective"]:
            by_inst.setdefault(row["instance"], {})[
                (row["method"], row["transform"])] = float(row["objective"])
    print("instance        transform  gap_closed_vs_hn_fh%")
    for inst, vals in sorted(by_inst.items()):
        hn = vals.get(("ex", "hn"))
        fh = vals.get(("ex", "fh"))
        if hn is None or fh is None:
            continue
        for tr in ("ma", "pm", "mm"):
            obj = vals.get(("ex", tr))
            if obj is None:
                continue
            gc = gap_closed(hn, obj, fh)
            print(f"{inst:<15} {tr:<10} {'-' if gc is None else f'{gc:.1f}'}")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mcsip",
                                 description="Markov-chain aggregation solvers "
                                             "for multi-stage stochastic MIPs")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="draw a relief-planning instance")
    g.add_argument("--grid", default="4x5")
    g.add_argument("--capacity-pct", type=float, default=0.25)
    g.add_argument("--modality-type", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve one instance with one method")
    s.add_argument("--instance", required=True)
    s.add_argument("--method", choices=METHODS, required=True)
    s.add_argument("--transform", choices=TRANSFORMS, default="pm")
    s.add_argument("--pm-attrs", type=int, nargs="*", default=None)
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--time-limit", type=float, default=None)
    s.add_argument("--rounds", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("evaluate", help="exact value of a stored policy")
    e.add_argument("--instance", required=True)
    e.add_argument("--solution", required=True)
    e.add_argument("--transform", choices=TRANSFORMS, default=None)
    e.add_argument("--pm-attrs", type=int, nargs="*", default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="run a method/transform/instance matrix")
    b.add_argument("--config", required=True)
    b.add_argument("--out")
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="summarize a bench CSV")
    r.add_argument("--input", required=True)
    r.set_defaults(func=cmd_report)

    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
