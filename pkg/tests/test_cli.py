import csv
import json
import os
import subprocess
import sys

import pytest

from cellflow.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, dispatch, sha256


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def manifest(path):
    with open(f"{path}.manifest.json") as fh:
        return json.load(fh)


def test_reeb_table_row_count(tmp_path):
    out = tmp_path / "t.csv"
    assert dispatch(["reeb-table", "--field", "canonical", "--levels", "64", "--out", str(out)]) == 0
    r = rows(out)
    assert r[0] == ["edge", "y", "a2", "b", "T"]
    assert len(r) == 1 + 4 * 64
    # 17 significant digits round-trip exactly
    y = r[1][1]
    assert float(repr(float(y))) == float(y)
    m = manifest(out)
    assert m["subcommand"] == "reeb-table" and m["digests"][str(out)] == sha256(out)
    assert {"config", "seed", "version", "wall_time"} <= set(m)


def test_unknown_flag_is_config_error(tmp_path, capsys):
    assert dispatch(["reeb-table", "--bogus", "1", "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    assert dispatch(["no-such-command"]) == EXIT_CONFIG


def test_bad_values_are_config_errors(tmp_path):
    out = str(tmp_path / "x.csv")
    assert dispatch(["simulate", "--epsilon", "1e-3", "--delta", "0.9", "--out", out]) == EXIT_CONFIG
    assert dispatch(["regime-sweep", "--rule", "sideways:1", "--out", out]) == EXIT_CONFIG
    assert dispatch(["graph-sim", "--dt", "0.1", "--horizon", "1", "--out", out]) == EXIT_CONFIG


def graph_args(out, seed=3):
    return ["graph-sim", "--edge", "1", "--y0", "0.4", "--horizon", "0.5", "--dt", "1e-4",
            "--delta", "0.1", "--paths", "200", "--seed", str(seed), "--out", str(out)]


def test_same_seed_same_digest(tmp_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    assert dispatch(graph_args(a)) == 0 and dispatch(graph_args(b)) == 0
    assert sha256(a) == sha256(b)
    assert dispatch(graph_args(c, seed=4)) == 0
    assert sha256(a) != sha256(c)
    r = rows(a)
    assert r[0] == ["path_id", "t", "edge", "y", "D", "N", "e_t", "L_est"] and len(r) == 201


def test_replay_from_manifest(tmp_path):
    out = tmp_path / "sim.csv"
    args = ["simulate", "--epsilon", "1e-3", "--paths", "20", "--stop", "shell",
            "--seed", "5", "--out", str(out)]
    assert dispatch(args) == 0
    digest = sha256(out)
    out.unlink()
    assert dispatch(["replay", f"{out}.manifest.json"]) == EXIT_OK
    assert sha256(out) == digest
    r = rows(out)
    assert r[0] == ["path_id", "kind", "t", "x1", "x2", "H"]
    assert {row[1] for row in r[1:]} == {"separatrix", "shell"} or {row[1] for row in r[1:]} == {"shell"}


def test_replay_detects_tampering(tmp_path):
    out = tmp_path / "t.csv"
    assert dispatch(["reeb-table", "--levels", "8", "--out", str(out)]) == 0
    man = f"{out}.manifest.json"
    m = json.loads(open(man).read())
    m["digests"][str(out)] = "0" * 64
    open(man, "w").write(json.dumps(m))
    assert dispatch(["replay", man]) == EXIT_NUMERICAL


def test_config_file_precedence(tmp_path):
    out = tmp_path / "g.csv"
    cfg = tmp_path / "run.conf"
    cfg.write_text("# graph run\npaths = 30\nseed = 9\nhorizon = 0.2\n")
    assert dispatch(["--config", str(cfg), "graph-sim", "--seed", "2", "--out", str(out)]) == 0
    conf = manifest(out)["config"]
    assert conf["paths"] == 30 and conf["seed"] == 2 and conf["horizon"] == 0.2
    assert conf["dt"] == 1e-4
    js = tmp_path / "run.json"
    js.write_text(json.dumps({"paths": 12, "y0": 0.7}))
    assert dispatch(["--config", str(js), "graph-sim", "--out", str(out)]) == 0
    assert manifest(out)["config"]["paths"] == 12
    js.write_text(json.dumps({"nonsense": 1}))
    assert dispatch(["--config", str(js), "graph-sim", "--out", str(out)]) == EXIT_CONFIG


def test_max_time_fraction_gives_exit_3(tmp_path):
    out = tmp_path / "s.csv"
    args = ["simulate", "--epsilon", "1e-2", "--paths", "10", "--stop", "domain",
            "--domain", "disk:100", "--start", "0,0", "--max-time", "0.01", "--out", str(out)]
    assert dispatch(args) == EXIT_NUMERICAL
    assert manifest(out)["flagged_fraction"] == 1.0


def test_chain_verify_report(tmp_path):
    out = tmp_path / "chain.json"
    assert dispatch(["chain-verify", "--epsilon", "1e-3,1e-4", "--samples", "2000",
                     "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert [r["epsilon"] for r in rep["reports"]] == [1e-3, 1e-4]
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"P0": [[0.9, 0.1], [0.2, 0.8]], "g": [[1, 0], [-1, 0]],
                                "h": [[1, 1], [0.5, 2]]}))
    assert dispatch(["chain-verify", "--spec", str(spec), "--samples", "1000",
                     "--out", str(out)]) == 0
    assert json.loads(out.read_text())["spec"]["P0"] == [[0.9, 0.1], [0.2, 0.8]]


def test_estimate_q_and_sweep(tmp_path):
    q = tmp_path / "q.json"
    assert dispatch(["estimate-q", "--epsilon", "1e-2", "--samples", "200", "--out", str(q)]) == 0
    data = json.loads(q.read_text())
    assert len(data["Q_hat"]) == 2 and data["n"] > 100
    s = tmp_path / "sweep.csv"
    assert dispatch(["regime-sweep", "--rule", "averaging:0.125", "--eps-list", "1e-2",
                     "--paths", "100", "--domain", "square:1", "--out", str(s)]) == 0
    r = rows(s)
    assert r[0] == ["epsilon", "R", "u_hat", "se", "oracle", "oracle_se", "ratio"]
    assert len(r) == 2


@pytest.mark.parametrize("threads", ["1", "4"])
def test_digest_independent_of_threads(tmp_path, threads):
    out = tmp_path / f"g{threads}.csv"
    env = dict(os.environ, NUMBA_NUM_THREADS=threads)
    cmd = [sys.executable, "-m", "cellflow", "--threads", threads] + graph_args(out)
    subprocess.run(cmd, check=True, env=env, capture_output=True)
    ref = tmp_path / "ref.csv"
    assert dispatch(graph_args(ref)) == 0
    assert sha256(out) == sha256(ref)
