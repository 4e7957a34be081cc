import csv
import hashlib
import json
import subprocess
import sys

import pytest

from posetsafe.cli import EXIT_CHECK, EXIT_OK, EXIT_USAGE, main


def run(tmp_path, *argv):
    return main(["--output-root", str(tmp_path), *argv])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_poset_manipulation_lists_two_extensions(tmp_path, capsys):
    assert run(tmp_path, "poset", "--scenario", "manipulation") == EXIT_OK
    out = capsys.readouterr().out
    assert "2 linear extensions" in out
    assert (tmp_path / "poset-manipulation" / "hasse.dot").read_text().startswith("digraph")
    assert len((tmp_path / "poset-manipulation" / "extensions.txt").read_text().splitlines()) == 2


def test_gen_data_schema_and_determinism(tmp_path):
    argv = ["gen-data", "--scenario", "navigation", "--episodes", "10", "--horizon", "20", "--seed", "4"]
    assert run(tmp_path, *argv, "--out", "a") == EXIT_OK
    assert run(tmp_path, *argv, "--out", "b") == EXIT_OK
    a, b = tmp_path / "a" / "dataset.csv", tmp_path / "b" / "dataset.csv"
    assert digest(a) == digest(b)
    with open(a, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["episode", "t"] and rows[0][-1] == "status"
    assert {r[0] for r in rows[1:]} == {str(e) for e in range(10)}
    assert len(rows) == 1 + 10 * 20
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["expert_failures"] == 0
    # the manifest alone reproduces the run
    assert run(tmp_path, "gen-data", "--config", str(tmp_path / "a" / "manifest.json"), "--out", "c") == EXIT_OK
    assert digest(tmp_path / "c" / "dataset.csv") == digest(a)


def test_gen_data_zero_horizon_warns(tmp_path, capsys):
    assert run(tmp_path, "gen-data", "--horizon", "0", "--episodes", "3") == EXIT_OK
    assert "warning" in capsys.readouterr().err
    lines = (tmp_path / "gen-data-navigation" / "dataset.csv").read_text().splitlines()
    assert len(lines) == 1


def test_usage_errors(tmp_path, capsys):
    assert run(tmp_path, "poset", "--no-such-flag") == EXIT_USAGE
    assert run(tmp_path, "frobnicate") == EXIT_USAGE
    assert run(tmp_path, "train", "--data", str(tmp_path / "missing.csv")) == EXIT_USAGE
    assert run(tmp_path, "poset", "--set", "gains") == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenario": "navigation", "colour": "red"}))
    assert run(tmp_path, "poset", "--config", str(bad)) == EXIT_USAGE
    assert run(tmp_path, "timing", "--batch-sizes", "[0]") == EXIT_USAGE


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": "navigation", "episodes": 2, "horizon": 5, "seed": 1}))
    assert run(tmp_path, "gen-data", "--config", str(cfg), "--episodes", "3",
               "--set", "gains.obstacle=[3.0, 3.0]", "--out", "x") == EXIT_OK
    man = json.loads((tmp_path / "x" / "manifest.json").read_text())
    assert man["config"]["episodes"] == 3 and man["config"]["horizon"] == 5
    assert man["config"]["overrides"] == {"gains": {"obstacle": [3.0, 3.0]}}
    assert man["command"] == "gen-data" and "dataset.csv" in man["outputs"]


def test_train_and_rollout_pipeline(tmp_path):
    assert run(tmp_path, "gen-data", "--episodes", "3", "--horizon", "15", "--out", "d") == EXIT_OK
    data = str(tmp_path / "d" / "dataset.csv")
    assert run(tmp_path, "--single-thread", "train", "--data", data, "--epochs", "2", "--out", "t1") == EXIT_OK
    assert run(tmp_path, "train", "--data", data, "--epochs", "2", "--out", "t2", "--single-thread") == EXIT_OK
    c1, c2 = tmp_path / "t1" / "curve.csv", tmp_path / "t2" / "curve.csv"
    assert c1.read_text().splitlines()[0] == "epoch,train_mse,val_mse"
    assert digest(c1) == digest(c2)
    ck = str(tmp_path / "t1" / "checkpoint.json")
    assert run(tmp_path, "rollout", "--checkpoint", ck, "--rollouts", "2", "--episodes", "2", "--horizon", "10",
               "--out", "r") == EXIT_OK
    assert (tmp_path / "r" / "metrics.csv").exists()
    # a checkpoint trained for another configuration is refused
    assert run(tmp_path, "rollout", "--checkpoint", ck, "--set", "goal=[7.0, 7.0]", "--horizon", "5") == EXIT_USAGE


def test_timing_writes_csv(tmp_path):
    rc = run(tmp_path, "timing", "--batch-sizes", "[1, 16]", "--max-heads", "3")
    assert rc in (EXIT_OK, EXIT_CHECK)
    with open(tmp_path / "timing" / "timing.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len({r["batch"] for r in rows if r["kind"] == "batch"}) >= 2


def test_help_documents_flags():
    res = subprocess.run([sys.executable, "-m", "posetsafe.cli", "bench", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for flag in ("--scenario", "--seed", "--set", "--rollouts", "--check", "--config"):
        assert flag in res.stdout


@pytest.mark.parametrize("cmd", ["gen-data", "train", "rollout", "bench", "ablate", "timing", "poset"])
def test_every_subcommand_has_help(cmd, capsys):
    assert main([cmd, "--help"]) == EXIT_OK
