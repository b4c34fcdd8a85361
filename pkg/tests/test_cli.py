import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from meanreflect import benchmarks
from meanreflect.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main, run


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def test_malformed_config_writes_nothing(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "out"
    assert run("simulate", bad, out) == EXIT_CONFIG
    assert not out.exists()
    cfg = benchmarks.halfline(steps=10)
    cfg["grid"]["M"] = 0
    assert run("simulate", write(tmp_path, cfg), out) == EXIT_CONFIG
    cfg = benchmarks.halfline(steps=10)
    cfg["coefficients"]["drift"] = [{"name": "mystery"}]
    assert run("simulate", write(tmp_path, cfg), out) == EXIT_CONFIG
    cfg = benchmarks.halfline(steps=10)
    cfg["N"] = 1
    assert run("simulate", write(tmp_path, cfg), out) == EXIT_CONFIG
    assert not out.exists()


def test_simulate_halfline_k_tracks_t(tmp_path):
    cfg = benchmarks.halfline(steps=200)
    cfg.update(N=2000, seeds=[3])
    out = tmp_path / "out"
    assert run("simulate", write(tmp_path, cfg), out, check=True) == EXIT_OK
    header, data = read_csv(out / "simulate_seed3.csv")
    assert header[:2] == ["t", "K0"]
    assert np.max(np.abs(data[:, 1] - data[:, 0])) < 0.1
    report = json.loads((out / "report.json").read_text())
    assert len(report["config_hash"]) == 64
    assert all(c["passed"] for c in report["checks"])
    cols = report["tables"]["simulate_summary"]["columns"]
    assert all("unit" in c and "provenance" in c for c in cols)


def test_outputs_bitwise_identical_across_threads(tmp_path):
    cfg = benchmarks.mean_field_attraction(steps=50, jumps=True)
    cfg.update(N=200, seeds=[0, 1, 2, 3])
    path = write(tmp_path, cfg)
    assert run("simulate", path, tmp_path / "a", threads=1) == EXIT_OK
    assert run("simulate", path, tmp_path / "b", threads=3) == EXIT_OK
    assert run("simulate", path, tmp_path / "c", threads=1) == EXIT_OK
    for f in sorted((tmp_path / "a").glob("*.csv")):
        data = f.read_bytes()
        assert data == (tmp_path / "b" / f.name).read_bytes()
        assert data == (tmp_path / "c" / f.name).read_bytes()


def test_check_failure_exit_code(tmp_path):
    cfg = benchmarks.mean_field_attraction(steps=20)
    cfg.update(N=200, seeds=[0], picard={"tol": 1e-12, "max_iter": 2})
    out = tmp_path / "out"
    assert run("picard", write(tmp_path, cfg), out, check=True) == EXIT_CHECK
    report = json.loads((out / "report.json").read_text())
    assert any("did not reach" in w for w in report["warnings"])
    assert run("picard", write(tmp_path, cfg), tmp_path / "o2", check=False) == EXIT_OK


def test_skorokhod_test_subcommand(tmp_path):
    cfg = {"domain": {"type": "ball", "center": [0, 0], "radius": 1.0},
           "map": {"l": [[1.0, 0.2], [0.0, 0.9]],
                   "v": {"kind": "linear", "intercept": [0, 0], "slope": [0.3, 0.1]}},
           "grid": {"T": 1.0, "M": 100}, "seeds": [0, 1],
           "path": {"drift": [1.0, 0.5], "scale": 0.5}}
    out = tmp_path / "out"
    assert run("skorokhod-test", write(tmp_path, cfg), out, check=True) == EXIT_OK
    header, data = read_csv(out / "skorokhod_ledger.csv")
    assert header == ["t", "x0", "x1", "k0", "k1", "k_variation"]
    assert data.shape == (101, 6)
    # path read from a CSV file
    t = np.linspace(0, 1, 101)
    np.savetxt(tmp_path / "path.csv", np.column_stack([t, -t, 0 * t]), delimiter=",",
               header="t,y0,y1", comments="")
    cfg["path"] = {"file": "path.csv"}
    cfg["domain"] = {"type": "halfspace", "normal": [-1.0, 0.0], "offset": 0.0}
    cfg["map"] = {"l": [[1.0, 0.0], [0.0, 1.0]]}
    out2 = tmp_path / "out2"
    assert run("skorokhod-test", write(tmp_path, cfg), out2, check=True) == EXIT_OK
    _, data = read_csv(out2 / "skorokhod_ledger.csv")
    assert np.allclose(data[:, 3], t, atol=1e-12)


def test_chaos_and_control_subcommands(tmp_path):
    cfg = benchmarks.halfline(steps=50)
    cfg.update(seeds=[0, 1, 2], chaos={"N_list": [10, 40], "N_ref": 160})
    out = tmp_path / "chaos"
    assert run("chaos-study", write(tmp_path, cfg), out) == EXIT_OK
    header, data = read_csv(out / "chaos.csv")
    assert header[0] == "N" and data.shape[0] == 2

    cfg = benchmarks.two_action_drift(steps=5)
    cfg.update(N=100, seeds=[0, 1], chatter={"n_list": [2, 8]})
    out = tmp_path / "chatter"
    assert run("control-chatter", write(tmp_path, cfg), out) == EXIT_OK
    _, data = read_csv(out / "chatter.csv")
    assert data.shape == (2, 5)

    rows = ["step,w0,w1"] + [f"{j},0.25,0.75" for j in range(5)]
    (tmp_path / "q.csv").write_text("\n".join(rows) + "\n")
    cfg["relaxed"] = {"file": "q.csv"}
    assert run("control-chatter", write(tmp_path, cfg), tmp_path / "c2") == EXIT_OK

    cfg.update(search={"cells": 2, "relaxed_resolution": 2})
    out = tmp_path / "search"
    assert run("control-search", write(tmp_path, cfg), out) == EXIT_OK
    assert (out / "search.csv").exists() and (out / "search_relaxed.csv").exists()
    cfg["search"] = {"cells": 13}
    assert run("control-search", write(tmp_path, cfg), tmp_path / "s2") == EXIT_CONFIG
    assert not (tmp_path / "s2").exists()


def test_main_entry_point(tmp_path):
    cfg = benchmarks.halfline(steps=20)
    cfg.update(N=50, seeds=[0])
    path = write(tmp_path, cfg)
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "m")]) == EXIT_OK
    proc = subprocess.run([sys.executable, "-m", "meanreflect", "simulate", "--config", str(path),
                           "--out", str(tmp_path / "p"), "--threads", "2"], capture_output=True)
    assert proc.returncode == EXIT_OK
    with pytest.raises(SystemExit):
        main(["simulate"])
