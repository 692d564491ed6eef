import json
import os
import subprocess
import sys

import pytest

from dynrisk import harness
from dynrisk.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main

TINY = ["--override", "agent.total_steps=400", "--override", "evaluation.cadence=200",
        "--override", "evaluation.episodes=2"]


def test_train_ok(tmp_path, capsys):
    code = main(["train", "--config", "maze-ql", "--seeds", "0-1", "--out", str(tmp_path), *TINY])
    assert code == EXIT_OK
    assert {"metrics_0.csv", "metrics_1.csv", "summary.json", "config.yaml"} <= {p.name for p in tmp_path.iterdir()}
    assert "risk-averse rate" in capsys.readouterr().out


def test_train_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["train", "--config", "cliffwalk-ql", "--seed", "3", *TINY]) == EXIT_OK
    assert (tmp_path / "cliffwalk-ql" / "metrics_3.csv").is_file()


@pytest.mark.parametrize("argv", [
    ["train", "--config", "no-such-config"],
    ["train", "--config", "maze-ql", "--override", "agent.bogus=1"],
    ["train", "--config", "maze-ql", "--seeds", "1,1"],
    ["train", "--config", "maze-ql", "--seed", "1", "--seeds", "2"],
    ["train", "--config", "maze-ql", "--workers", "0"],
    ["train"],
    ["oracle", "--env", "maze", "--risk", "cvar"],
    ["oracle", "--env", "maze", "--risk", "cvar", "--alpha", "1.5"],
    ["oracle", "--env", "nowhere", "--risk", "mean"],
    ["evaluate", "--env", "maze", "--policy", "/nonexistent/policy.csv"],
    ["frobnicate"],
    [],
])
def test_validation_errors_exit_1(argv):
    assert main(argv) == EXIT_VALIDATION


def test_failed_seed_exits_2(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("kernel exploded")

    monkeypatch.setattr(harness, "train", broken)
    assert main(["train", "--config", "maze-ql", "--seed", "0", "--out", str(tmp_path), *TINY]) == EXIT_RUNTIME


def test_unwritable_output_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["train", "--config", "maze-ql", "--seed", "0", "--out", str(blocker / "sub"), *TINY]) == EXIT_RUNTIME


def test_oracle_evaluate_and_plot(tmp_path, capsys):
    out = tmp_path / "oracle"
    assert main(["oracle", "--env", "cliffwalk", "--risk", "expectile", "--alpha", "0.05",
                 "--out", str(out)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["classification"] == "RISK_AVERSE"
    assert main(["evaluate", "--env", "cliffwalk", "--policy", str(out / "policy.csv"), "--episodes", "20",
                 "--risk", "mean", "--out", str(tmp_path / "eval.json")]) == EXIT_OK
    assert json.loads((tmp_path / "eval.json").read_text())["risk_averse_rate"] == 1.0
    capsys.readouterr()
    run = tmp_path / "run"
    assert main(["train", "--config", "maze-ql", "--seeds", "0-1", "--out", str(run), *TINY]) == EXIT_OK
    pytest.importorskip("matplotlib")
    assert main(["plot", "--run", str(run)]) == EXIT_OK
    assert (run / "risk_averse_rate.png").is_file()
    assert main(["plot", "--run", str(tmp_path / "empty")]) == EXIT_VALIDATION


def test_module_entry_point_and_fallback(tmp_path):
    env = dict(os.environ, DYNRISK_DISABLE_NUMBA="1")
    proc = subprocess.run([sys.executable, "-m", "dynrisk", "oracle", "--env", "maze", "--risk", "cvar",
                           "--alpha", "0.1", "--episodes", "10"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["counts"]["RISK_AVERSE"] == 10
    flag = subprocess.run([sys.executable, "-c", "import dynrisk._accel as a; print(a.USE_NUMBA)"],
                          capture_output=True, text=True, env=env)
    assert flag.stdout.strip() == "False"
