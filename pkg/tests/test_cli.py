import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from certctl.cli import main
from certctl.sim import trace_columns
from helpers import PENDULUM, WALL, config, toml_text


def write(tmp_path, d, name="run.toml"):
    p = tmp_path / name
    p.write_text(toml_text(d))
    return p


def body(path):
    return "".join(l for l in path.read_text().splitlines(True) if not l.startswith("#"))


def read_csv(path):
    return list(csv.DictReader(l for l in path.read_text().splitlines() if not l.startswith("#")))


def test_train_writes_artifacts(tmp_path, capsys):
    cfgp = write(tmp_path, PENDULUM)
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfgp), "--out", str(out), "--episodes", "2"]) == 0
    for name in ("policy.json", "training_log.csv", "train_summary.json", "training_curve.png",
                 "checkpoint.npz"):
        assert (out / name).exists(), name
    head = (out / "training_log.csv").read_text().splitlines()[:2]
    assert head[0].startswith("# config_hash=") and head[1] == "# seed=3"
    pol = json.loads((out / "policy.json").read_text())
    assert pol["format_version"] == 1 and pol["seed"] == 3 and "critic" in pol
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["episodes"] == 2
    # resume continues the episode numbering up to the total budget
    assert main(["train", "--config", str(cfgp), "--out", str(out), "--episodes", "4",
                 "--resume", str(out / "checkpoint.npz"), "--no-figures"]) == 0
    rows = read_csv(out / "training_log.csv")
    assert [int(r["episode"]) for r in rows] == [0, 1, 2, 3]


def test_train_is_reproducible(tmp_path):
    cfgp = write(tmp_path, PENDULUM)
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfgp), "--out", str(tmp_path / d), "--no-figures"]) == 0
    assert body(tmp_path / "a" / "training_log.csv") == body(tmp_path / "b" / "training_log.csv")


def test_seed_override(tmp_path):
    cfgp = write(tmp_path, PENDULUM)
    main(["eval", "--config", str(cfgp), "--out", str(tmp_path / "o"), "--seed", "11",
          "--episodes", "1", "--no-figures"])
    s = json.loads((tmp_path / "o" / "eval_summary.json").read_text())
    assert s["seed"] == 11 and s["per_episode"][0]["seed"] == 11 * 100_003 + 10_000


def test_eval_zero_policy_identical_plants(tmp_path):
    cfgp = write(tmp_path, config(WALL, uncertainty__mode="none", episode__horizon=2.0))
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(cfgp), "--out", str(out), "--episodes", "3"]) == 0
    s = json.loads((out / "eval_summary.json").read_text())
    assert s["barrier_violation_episodes"] == 0
    assert (out / "eval_traces.png").exists()
    files = sorted((out / "traces").glob("episode_*.csv"))
    assert len(files) == 3
    # aggregate counts equal a recomputation from the trace CSVs
    steps = 0
    for f in files:
        rows = read_csv(f)
        steps += sum(float(r["B_0"]) < -s["violation_tol"] for r in rows)
    assert steps == s["barrier_violation_steps"]


def test_eval_nominal_reports_wall_violations(tmp_path):
    cfgp = write(tmp_path, config(WALL, episode__horizon=5.0))
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(cfgp), "--out", str(out), "--episodes", "10",
                 "--variant", "cbf-clf-qp", "--no-figures"]) == 0
    s = json.loads((out / "eval_summary.json").read_text())
    assert s["barrier_violation_episodes"] >= 1
    files = sorted((out / "traces").glob("episode_*.csv"))
    n_zeta = sum(any(float(r[f"zeta_{j}"]) > s["violation_tol"] for j in (0, 1) if r[f"zeta_{j}"])
                 for f in files for r in read_csv(f))
    assert n_zeta == s["constraint_violation_steps"]


def test_eval_csv_is_deterministic(tmp_path):
    cfgp = write(tmp_path, WALL)
    for d in ("a", "b"):
        main(["eval", "--config", str(cfgp), "--out", str(tmp_path / d), "--episodes", "2",
              "--no-figures"])
    for name in ("episode_000.csv", "episode_001.csv"):
        assert body(tmp_path / "a" / "traces" / name) == body(tmp_path / "b" / "traces" / name)


def test_eval_rejects_malformed_policy(tmp_path, capsys):
    cfgp = write(tmp_path, PENDULUM)
    bad = tmp_path / "p.json"
    bad.write_text('{"format_version": 1}')
    assert main(["eval", "--config", str(cfgp), "--policy", str(bad), "--out",
                 str(tmp_path / "o"), "--no-figures"]) == 1
    assert "error" in capsys.readouterr().err


def test_eval_rejects_policy_for_other_layout(tmp_path):
    pend = write(tmp_path, PENDULUM, "p.toml")
    main(["train", "--config", str(pend), "--out", str(tmp_path / "t"), "--episodes", "1",
          "--no-figures"])
    wall = write(tmp_path, WALL, "w.toml")
    assert main(["eval", "--config", str(wall), "--policy", str(tmp_path / "t" / "policy.json"),
                 "--out", str(tmp_path / "o"), "--no-figures"]) == 1


def test_compare_aligned_traces(tmp_path):
    cfgp = write(tmp_path, PENDULUM)
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfgp), "--out", str(out)]) == 0
    s = json.loads((out / "compare_summary.json").read_text())
    assert set(s["variants"]) == {"clf-qp", "rl-clf-qp"}
    seeds = [v["seeds"] for v in s["variants"].values()]
    assert seeds[0] == seeds[1] == s["episode_seeds"]
    for v in s["variants"].values():
        assert "barrier_violation_steps" in v and "clf_violation_steps" in v
    rows = read_csv(out / "compare_000.csv")
    assert {"time", "clf-qp:eta_norm", "rl-clf-qp:eta_norm", "clf-qp:Vdot_margin"} <= set(rows[0])
    # zero policy: the two variants coincide
    a = [r["clf-qp:eta_norm"] for r in rows]
    b = [r["rl-clf-qp:eta_norm"] for r in rows]
    np.testing.assert_allclose(np.array(a, float), np.array(b, float), atol=1e-9)
    assert (out / "compare.png").exists()


def test_config_error_exit_code(tmp_path, capsys):
    cfgp = write(tmp_path, config(PENDULUM, plant__id="rocket"))
    assert main(["train", "--config", str(cfgp), "--out", str(tmp_path)]) == 2
    assert "unknown plant" in capsys.readouterr().err
    assert main(["eval", "--config", str(tmp_path / "missing.toml")]) == 2


def test_selftest_clean_and_injected(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 8
    code = main(["selftest", "--inject", "lyapunov"])
    assert 1 <= code <= 125
    assert "FAIL lyapunov_residual" in capsys.readouterr().out
    assert main(["selftest", "--inject", "qp"]) >= 1


def test_console_script_subprocess(tmp_path):
    cfgp = write(tmp_path, config(PENDULUM, plant__id="rocket"))
    r = subprocess.run([sys.executable, "-m", "certctl.cli", "eval", "--config", str(cfgp)],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "unknown plant" in r.stderr
