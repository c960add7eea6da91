import csv
import json
import os

import numpy as np
import pytest

from mcsip.cli import gap_closed, main, relative_difference


def test_gap_closed_endpoints():
    assert gap_closed(100.0, 80.0, 80.0) == pytest.approx(100.0)
    assert gap_closed(100.0, 100.0, 80.0) == pytest.approx(0.0)


def test_gap_closed_reference_values():
    assert gap_closed(104162.0, 92924.0, 82193.0) == pytest.approx(51.15, abs=0.01)


def test_gap_closed_degenerate_denominator():
    assert gap_closed(100.0, 100.0, 100.0) is None


def test_gap_closed_rejects_inverted_inputs():
    with pytest.raises(ValueError):
        gap_closed(80.0, 90.0, 100.0)


def test_relative_difference():
    assert relative_difference(100.0, 100.0) == 0.0
    assert relative_difference(100.0, 101.0) == pytest.approx(1.0)
    assert relative_difference(200.0, 150.0) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        relative_difference(0.0, 1.0)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rc = main(["generate", "--grid", "2x4", "--capacity-pct", "0.2",
               "--seed", "5", "--out", str(d / "inst.json")])
    assert rc == 0
    return d


def test_generate_solve_evaluate_round_trip(workdir):
    d = workdir
    rc = main(["solve", "--instance", str(d / "inst.json"), "--method", "ex",
               "--transform", "pm", "--out", str(d / "ex.json")])
    assert rc == 0
    sol = json.loads((d / "ex.json").read_text())
    assert sol["status"] == "optimal"
    assert sol["z"]
    rc = main(["evaluate", "--instance", str(d / "inst.json"),
               "--solution", str(d / "ex.json"), "--out", str(d / "eval.json")])
    assert rc == 0
    ev = json.loads((d / "eval.json").read_text())
    assert ev["objective"] == pytest.approx(sol["objective"], rel=1e-6)


def test_solve_ldr_writes_rule_and_inventories(workdir):
    d = workdir
    rc = main(["solve", "--instance", str(d / "inst.json"), "--method", "ldr-m",
               "--transform", "pm", "--out", str(d / "ldr.json")])
    assert rc == 0
    sol = json.loads((d / "ldr.json").read_text())
    assert sol["lam"] and sol["x_nodes"]


def bench_config(d, methods, transforms, bad=False):
    conf = {
        "instances": [{"grid": "2x4", "capacity_pct": 0.2, "seed": 5, "id": "toy5"}],
        "methods": methods,
        "transforms": transforms,
        "seed": 0,
    }
    if bad:
        conf["instances"][0]["grid"] = "2x4"
    p = d / "bench.json"
    p.write_text(json.dumps(conf))
    return p


def test_bench_empty_methods_gives_header_only(workdir, tmp_path):
    conf = bench_config(tmp_path, [], [])
    rc = main(["bench", "--config", str(conf), "--out", str(tmp_path / "r.csv")])
    assert rc == 0
    lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("instance,method,transform")


def test_bench_rows_and_oracle_equality(tmp_path):
    conf = bench_config(tmp_path, ["ex", "sddp"], ["hn", "fh"])
    rc = main(["bench", "--config", str(conf), "--out", str(tmp_path / "r.csv")])
    assert rc == 0
    with open(tmp_path / "r.csv") as fp:
        rows = list(csv.DictReader(fp))
    assert len(rows) == 4
    by = {(r["method"], r["transform"]): float(r["objective"]) for r in rows}
    for tr in ("hn", "fh"):
        assert by[("sddp", tr)] == pytest.approx(by[("ex", tr)], rel=1e-5)
    # a sidecar holds the wall times so the report body stays reproducible
    assert os.path.exists(str(tmp_path / "r.csv") + ".times.csv")


def test_bench_reruns_are_byte_identical(tmp_path):
    conf = bench_config(tmp_path, ["ex", "sddp-lb"], ["pm"])
    main(["bench", "--config", str(conf), "--out", str(tmp_path / "a.csv")])
    main(["bench", "--config", str(conf), "--out", str(tmp_path / "b.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_bench_parallel_jobs_match_serial(tmp_path):
    conf = bench_config(tmp_path, ["ex"], ["hn", "fh"])
    main(["bench", "--config", str(conf), "--out", str(tmp_path / "s.csv")])
    main(["bench", "--config", str(conf), "--out", str(tmp_path / "p.csv"),
          "--jobs", "2"])
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "p.csv").read_bytes()


def test_bench_partial_failure_exit_code(tmp_path):
    conf_path = tmp_path / "bad.json"
    conf_path.write_text(json.dumps({
        "instances": [{"grid": "2x4", "seed": 5, "id": "t"}],
        "methods": ["nosuch"],
        "transforms": ["hn"],
    }))
    rc = main(["bench", "--config", str(conf_path), "--out", str(tmp_path / "r.csv")])
    assert rc == 2
    with open(tmp_path / "r.csv") as fp:
        rows = list(csv.DictReader(fp))
    assert rows[0]["status"] == "error" and rows[0]["error"]


def test_bench_config_error_exit_code(tmp_path):
    missing = tmp_path / "none.json"
    rc = main(["bench", "--config", str(missing), "--out", str(tmp_path / "r.csv")])
    assert rc == 3


def test_report_summarizes_gap_closed(tmp_path, capsys):
    rows = [
        {"instance": "i", "method": "ex", "transform": "hn", "seed": 0,
         "status": "optimal", "objective": "100", "bound": "100", "gap": "0",
         "cuts": "0", "error": ""},
        {"instance": "i", "method": "ex", "transform": "ma", "seed": 0,
         "status": "optimal", "objective": "90", "bound": "90", "gap": "0",
         "cuts": "0", "error": ""},
        {"instance": "i", "method": "ex", "transform": "fh", "seed": 0,
         "status": "optimal", "objective": "80", "bound": "80", "gap": "0",
         "cuts": "0", "error": ""},
    ]
    p = tmp_path / "r.csv"
    with open(p, "w", newline="") as fp:
        w = csv.DictWriter(fp, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    rc = main(["report", "--input", str(p)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "50.0" in out


def test_out_dir_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("MCSIP_OUT_DIR", str(tmp_path / "outs"))
    rc = main(["generate", "--grid", "2x4", "--seed", "1"])
    assert rc == 0
    assert os.path.exists(tmp_path / "outs" / "hdr_2x4_s1.json")
