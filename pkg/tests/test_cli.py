import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from codedml import coded_shuffle as cs
from codedml.cli import main, stream_rng, stream_seed
from codedml.matrix_io import write_csv


def run(argv, capsys):
    rc = main(argv)
    out, err = capsys.readouterr()
    return rc, out, err


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_help_exits_zero(capsys):
    rc, out, _ = run(["--help"], capsys)
    assert rc == 0 and "plan-code" in out and "run-master" in out
    rc, out, _ = run(["psgd", "--help"], capsys)
    assert rc == 0 and "--scheme" in out


def test_unknown_flag_and_bad_values_exit_two(capsys):
    assert run(["plan-code", "--n", "10", "--frobnicate"], capsys)[0] == 2
    assert run(["plan-code"], capsys)[0] == 2
    assert run(["plan-code", "--n", "10", "--seed", "-1"], capsys)[0] == 2
    assert run(["plan-code", "--n", "0"], capsys)[0] == 2
    assert run(["sim-runtime", "--code", "mds:n=3,k=5"], capsys)[0] == 2
    assert run(["shuffle-rate", "--q", "1000", "--n", "10", "--s", "5"], capsys)[0] == 2


def test_runtime_failure_exits_one(tmp_path, capsys):
    assert run(["matmul", "--matrix", str(tmp_path / "missing.csv"), "--vector", "x", "--code", "mds:n=3,k=2"], capsys)[0] == 1


def test_plan_code_json(capsys):
    rc, out, _ = run(["plan-code", "--n", "100", "--mu", "1", "--scheme", "mds"], capsys)
    d = json.loads(out)
    assert rc == 0 and d["k_star"] == 69 and d["gamma_star"] == pytest.approx(3.1462, abs=1e-3)


def test_config_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 100, "mu": 1.0}))
    rc, out, _ = run(["plan-code", "--config", str(cfg)], capsys)
    assert rc == 0 and json.loads(out)["k_star"] == 69
    rc, out, _ = run(["plan-code", "--config", str(cfg), "--n", "10"], capsys)
    assert json.loads(out)["n"] == 10
    cfg.write_text(json.dumps({"n": 100, "colour": "red"}))
    rc, _, err = run(["plan-code", "--config", str(cfg)], capsys)
    assert rc == 2 and "colour" in err
    cfg.write_text("[1, 2]")
    assert run(["plan-code", "--config", str(cfg)], capsys)[0] == 2
    cfg.write_text(json.dumps({"n": 10, "scheme": "lt"}))
    assert run(["plan-code", "--config", str(cfg)], capsys)[0] == 2


def test_seed_streams():
    a = stream_rng(7, "x").random(3)
    assert np.array_equal(a, stream_rng(7, "x").random(3))
    assert not np.array_equal(a, stream_rng(7, "y").random(3))
    assert not np.array_equal(a, stream_rng(8, "x").random(3))
    assert stream_seed(7, "x") == stream_seed(7, "x") < 2**64


@pytest.mark.parametrize("argv, header", [
    (["sim-runtime", "--code", "mds:n=10,k=5", "--reps", "200"], ["replicate", "completion_time", "responding_set"]),
    (["gd", "--mode", "sim", "--steps", "5"], ["iter", "objective", "wall_time"]),
    (["shuffle-sim", "--q", "120", "--n", "4", "--s", "60", "--epochs", "3", "--verify"],
     ["epoch", "rows_uncoded", "rows_coded_measured", "rows_coded_analytic"]),
    (["psgd", "--epochs", "3", "--rows", "200", "--cols", "10"], ["epoch", "objective", "wall_none", "wall_uncoded", "wall_coded"]),
])
def test_schemas_and_byte_identical_reruns(argv, header, tmp_path, capsys):
    paths = []
    for i in range(2):
        p = tmp_path / f"out{i}.csv"
        extra = ["--summary", str(tmp_path / f"s{i}.json")] if argv[0] == "sim-runtime" else []
        assert run(argv + ["--seed", "42", "--out", str(p)] + extra, capsys)[0] == 0
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert read_rows(paths[0])[0] == header
    p3 = tmp_path / "other.csv"
    extra = ["--summary", str(tmp_path / "s3.json")] if argv[0] == "sim-runtime" else []
    run(argv + ["--seed", "43", "--out", str(p3)] + extra, capsys)
    assert p3.read_bytes() != paths[0].read_bytes()


def test_sim_runtime_summary(capsys):
    rc, out, _ = run(["sim-runtime", "--code", "mds:n=10,k=5", "--reps", "20000", "--straggler-prob", "0"], capsys)
    d = json.loads(out)
    assert rc == 0 and set(d) >= {"mean", "p50", "p95", "p99", "replications", "expected_runtime"}
    assert abs(d["mean"] / 0.329127 - 1) < 0.02
    rc, out, _ = run(["sim-runtime", "--code", "uncoded:n=10", "--reps", "100", "--latency-file", "builtin"], capsys)
    assert rc == 0 and "expected_runtime" not in json.loads(out)


def test_matmul(tmp_path, capsys):
    rng = np.random.default_rng(0)
    A, x = rng.random((20, 4)), rng.random(4)
    write_csv(tmp_path / "A.csv", A)
    write_csv(tmp_path / "x.csv", x[:, None])
    for extra in (["--responders", "4,1,3,0,2"], ["--mode", "sim"]):
        rc, out, _ = run(["matmul", "--matrix", str(tmp_path / "A.csv"), "--vector", str(tmp_path / "x.csv"),
                          "--code", "mds:n=5,k=3"] + extra, capsys)
        assert rc == 0
        np.testing.assert_allclose([float(v) for v in out.split()], A @ x, rtol=1e-10)


def test_gd_exact_decreases(tmp_path, capsys):
    rc, out, _ = run(["gd", "--steps", "30"], capsys)
    obj = [float(r[1]) for r in list(csv.reader(out.splitlines()))[1:]]
    assert rc == 0 and len(obj) == 31 and obj[-1] < obj[0]


def test_gd_live(capsys):
    rc, out, _ = run(["gd", "--mode", "live", "--n", "5", "--k1", "4", "--k2", "3", "--steps", "5", "--rows", "40", "--cols", "5"], capsys)
    live = list(csv.reader(out.splitlines()))
    rc2, out2, _ = run(["gd", "--n", "5", "--k1", "4", "--k2", "3", "--steps", "5", "--rows", "40", "--cols", "5"], capsys)
    exact = list(csv.reader(out2.splitlines()))
    assert rc == rc2 == 0
    np.testing.assert_allclose([float(r[1]) for r in live[1:]], [float(r[1]) for r in exact[1:]], rtol=1e-8)


def test_shuffle_rate(capsys):
    rc, out, _ = run(["shuffle-rate", "--q", "1000", "--n", "50", "--s", "100"], capsys)
    d = json.loads(out)
    assert rc == 0 and d["rate_uncoded"] == 900 and d["rate_coded"] == pytest.approx(170.655, abs=0.01)
    assert 0.81 < d["reduction"] < 0.82
    assert run(["shuffle-rate", "--q", "1000", "--n", "25", "--s", "100"], capsys)[0] == 0
    assert run(["shuffle-rate", "--q", "1000", "--n", "25", "--s", "100", "--measure"], capsys)[0] == 2  # planner cap
    rc, out, _ = run(["shuffle-rate", "--q", "1000", "--n", "10", "--s", "200", "--measure", "--reps", "3"], capsys)
    d = json.loads(out)
    assert rc == 0 and d["measured_reps"] == 3 and d["measured_uncoded"] > d["measured_coded"] >= d["rate_coded"] * 0.95


def test_figure_data(tmp_path, capsys):
    assert run(["figure-data", "--out-dir", str(tmp_path)], capsys)[0] == 0
    fig12 = read_rows(tmp_path / "fig12.csv")
    assert fig12[0] == ["s_over_q", "rate_uncoded", "rate_coded"] and len(fig12) == 51
    vals = {float(r[0]): (float(r[1]), float(r[2])) for r in fig12[1:]}
    assert vals[0.1][0] == 900 and vals[0.1][1] == pytest.approx(170.7, abs=0.05)
    assert vals[1.0] == (0.0, 0.0)
    assert vals[0.1][1] == cs.rate_coded_closed(1000, 100, 50)
    fig6 = np.array(read_rows(tmp_path / "fig6a.csv")[1:], dtype=float)
    assert read_rows(tmp_path / "fig6a.csv")[0] == ["t", "cdf_uncoded", "cdf_repetition", "cdf_mds"]
    c = fig6[:, 1:]
    assert c.min() >= 0 and c.max() <= 1 and np.all(np.diff(c, axis=0) >= -1e-15)
    fig11 = read_rows(tmp_path / "fig11.csv")
    assert fig11[0] == ["epoch", "objective_none", "objective_shuffled", "wall_none", "wall_uncoded", "wall_coded"]
    assert len(fig11) == 21
    before = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    run(["figure-data", "--out-dir", str(tmp_path)], capsys)
    assert {p.name: p.read_bytes() for p in tmp_path.iterdir()} == before


def test_encode_serve_and_run_master(tmp_path):
    rng = np.random.default_rng(1)
    A, x = rng.standard_normal((10, 3)), rng.standard_normal(3)
    write_csv(tmp_path / "A.csv", A)
    write_csv(tmp_path / "x.csv", x[:, None])
    cli = [sys.executable, "-m", "codedml"]
    subprocess.run(cli + ["encode", "--matrix", str(tmp_path / "A.csv"), "--code", "mds:n=5,k=3", "--out-dir", str(tmp_path / "w")], check=True)
    manifest = json.loads((tmp_path / "w" / "manifest.json").read_text())
    assert manifest["code"] == "mds:n=5,k=3" and len(manifest["assignments"]) == 5
    procs, eps = [], []
    try:
        for name in manifest["assignments"]:
            p = subprocess.Popen(cli + ["serve-worker", "--listen", "127.0.0.1:0", "--assignment", str(tmp_path / "w" / name)],
                                 stdout=subprocess.PIPE, text=True)
            procs.append(p)
            eps.append(p.stdout.readline().strip().removeprefix("listening on "))
        res = subprocess.run(cli + ["run-master", "--workers", ",".join(eps), "--code", "mds:n=5,k=3", "--input", str(tmp_path / "x.csv"),
                                    "--padding-rows", str(manifest["padding_rows"]), "--shutdown"], capture_output=True, text=True, timeout=60)
        assert res.returncode == 0, res.stderr
        np.testing.assert_allclose([float(v) for v in res.stdout.split()], A @ x, rtol=1e-10)
        info = json.loads(res.stderr)
        assert len(info["responding"]) == 3 and info["failed"] == []
        assert [p.wait(10) for p in procs] == [0] * 5
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
            p.wait()
            p.stdout.close()


def test_run_master_bad_code_exit_two(tmp_path):
    (tmp_path / "x.csv").write_text("1\n")
    res = subprocess.run([sys.executable, "-m", "codedml", "run-master", "--workers", "127.0.0.1:1", "--code", "mds:n=2,k=3",
                          "--input", str(tmp_path / "x.csv")], capture_output=True, text=True)
    assert res.returncode == 2
