"""End-to-end tests of the command line interface."""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from stlmarl.cli import main
from stlmarl.model import load_policy
from stlmarl.stl import conjoin, load_trace, parse_formula, robustness
from stlmarl.world import load_episode

REPO_ROOT = Path(__file__).resolve().parents[1]

TINY_CONFIG = """
n_agents = 2
horizon = 4
task = reach
embed_dim = 16
n_heads = 2
n_encoder_blocks = 1
n_value_blocks = 1
n_decoder_blocks = 1
iterations = 2
rollouts_per_iter = 2
ppo_epochs = 2
workers = 1
seed = 3
"""


def write_config(tmp_path: Path, name="run.cfg", extra="", **overrides) -> Path:
    lines = {}
    for line in TINY_CONFIG.strip().splitlines():
        key, value = line.split("=", 1)
        lines[key.strip()] = value.strip()
    for key, value in overrides.items():
        lines[key] = str(value)
    text = "\n".join(f"{k} = {v}" for k, v in lines.items())
    if extra:
        text += "\n" + extra
    path = tmp_path / name
    path.write_text(text + "\n", encoding="utf-8")
    return path


def read_spec(path: Path):
    lines = [ln.split("#", 1)[0].strip() for ln in path.read_text().splitlines()]
    return conjoin([parse_formula(ln) for ln in lines if ln])


# ---------------------------------------------------------------------------
# Error taxonomy
# ---------------------------------------------------------------------------


def test_missing_config_is_usage_error(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "absent.cfg")])
    assert code == 2
    err = capsys.readouterr().err
    assert "absent.cfg" in err
    assert "cannot read config" in err


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = write_config(tmp_path, extra="frobnicate = 7")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "frobnicate" in capsys.readouterr().err


def test_bad_config_value_is_usage_error(tmp_path, capsys):
    cfg = write_config(tmp_path, learning_rate="fast")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_corrupt_checkpoint_is_io_error(tmp_path, capsys):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint at all")
    assert main(["eval", "--checkpoint", str(bogus), "--out", str(tmp_path / "e")]) == 3
    assert "checkpoint" in capsys.readouterr().err.lower()


def test_divergent_training_exits_4(tmp_path, capsys):
    cfg = write_config(tmp_path, n_agents=1, horizon=2, embed_dim=8,
                       learning_rate="1000000000.0", iterations=4, ppo_epochs=4,
                       out=str(tmp_path / "div"))
    code = main(["train", "--config", str(cfg)])
    assert code == 4
    err = capsys.readouterr().err
    assert "diverged" in err
    assert (tmp_path / "div" / "diverged.ckpt").exists()


# ---------------------------------------------------------------------------
# Train
# ---------------------------------------------------------------------------


def test_train_smoke_single_iteration(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = write_config(tmp_path, iterations=1, rollouts_per_iter=1, out=str(out))
    assert main(["train", "--config", str(cfg)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iteration,env_steps,mean_robustness,satisfaction_rate,loss_enc_v,loss_dec"
    assert len(lines) == 2
    assert lines[1].startswith("1,4,")
    for name in ("config.txt", "checkpoint.ckpt", "task_spec.txt", "training_curves.png"):
        assert (out / name).exists(), name
    policy, meta = load_policy(out / "checkpoint.ckpt")
    assert meta["task"] == "reach"
    assert len(meta["task_formulas"]) == 2


def test_train_rerun_and_snapshot_rerun_are_byte_identical(tmp_path):
    out_a, out_b, out_c = (tmp_path / n for n in ("a", "b", "c"))
    cfg = write_config(tmp_path, out=str(out_a))
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out_b)]) == 0
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
    # the resolved snapshot reproduces the run too
    assert main(["train", "--config", str(out_a / "config.txt"), "--out", str(out_c)]) == 0
    assert (out_a / "metrics.csv").read_bytes() == (out_c / "metrics.csv").read_bytes()


def test_train_periodic_checkpoints(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(tmp_path, checkpoint_every=1, out=str(out))
    assert main(["train", "--config", str(cfg)]) == 0
    for name in ("checkpoint_iter0001.ckpt", "checkpoint_iter0002.ckpt"):
        policy, meta = load_policy(out / name)
        assert meta["task"] == "reach"


def test_train_seed_override_changes_metrics(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(out_a)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out_b), "--seed", "99"]) == 0
    assert (out_a / "metrics.csv").read_bytes() != (out_b / "metrics.csv").read_bytes()
    snapshot = (out_b / "config.txt").read_text()
    assert "seed = 99" in snapshot


# ---------------------------------------------------------------------------
# Eval
# ---------------------------------------------------------------------------


def trained_checkpoint(tmp_path: Path) -> Path:
    out = tmp_path / "train_out"
    cfg = write_config(tmp_path, iterations=1, rollouts_per_iter=1, out=str(out))
    assert main(["train", "--config", str(cfg)]) == 0
    return out / "checkpoint.ckpt"


def test_eval_writes_one_trace_per_episode(tmp_path, capsys):
    ckpt = trained_checkpoint(tmp_path)
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "2",
                 "--seed", "5", "--out", str(out)]) == 0
    traces = sorted(out.glob("trace_*.jsonl"))
    assert [p.name for p in traces] == ["trace_000.jsonl", "trace_001.jsonl"]
    assert (out / "eval_episode0.png").exists()
    assert (out / "task_spec.txt").exists()


def test_eval_printed_robustness_recomputable_from_artifacts(tmp_path, capsys):
    ckpt = trained_checkpoint(tmp_path)
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "3",
                 "--seed", "8", "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    spec = read_spec(out / "task_spec.txt")
    printed = {}
    for line in stdout.splitlines():
        if line.startswith("episode "):
            parts = line.split()
            printed[int(parts[1].rstrip(":"))] = float(parts[3])
    assert set(printed) == {0, 1, 2}
    for k, value in printed.items():
        trajectory = load_trace(out / f"trace_{k:03d}.jsonl")
        assert robustness(spec, trajectory, 0) == value
        # the richer episode loader sees the same trajectory
        record = load_episode(out / f"trace_{k:03d}.jsonl")
        assert robustness(spec, record.trajectory, 0) == value


def test_eval_monitor_round_trip(tmp_path, capsys):
    ckpt = trained_checkpoint(tmp_path)
    capsys.readouterr()
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "1",
                 "--seed", "2", "--out", str(out)]) == 0
    eval_out = capsys.readouterr().out
    eval_rho = float(eval_out.splitlines()[0].split()[3])
    code = main(["monitor", str(out / "task_spec.txt"), str(out / "trace_000.jsonl")])
    monitor_out = capsys.readouterr().out
    monitor_rho = float(monitor_out.splitlines()[0].split()[1])
    assert monitor_rho == eval_rho
    assert code == (0 if eval_rho > 0 else 1)


def test_eval_greedy_is_deterministic(tmp_path, capsys):
    ckpt = trained_checkpoint(tmp_path)
    capsys.readouterr()
    out_a, out_b = tmp_path / "ga", tmp_path / "gb"
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "2", "--seed", "4",
                 "--greedy", "--out", str(out_a)]) == 0
    first = capsys.readouterr().out.replace(str(out_a), "OUT")
    assert main(["eval", "--checkpoint", str(ckpt), "--episodes", "2", "--seed", "4",
                 "--greedy", "--out", str(out_b)]) == 0
    second = capsys.readouterr().out.replace(str(out_b), "OUT")
    assert first == second
    for k in range(2):
        name = f"trace_{k:03d}.jsonl"
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


# ---------------------------------------------------------------------------
# Verify
# ---------------------------------------------------------------------------


def test_verify_report_coherent_and_reproducible(tmp_path, capsys):
    ckpt = trained_checkpoint(tmp_path)
    out_a, out_b = tmp_path / "va", tmp_path / "vb"
    args = ["verify", "--checkpoint", str(ckpt), "--n", "8", "--confidence", "0.9",
            "--seed", "6", "--workers", "2"]
    assert main(args + ["--out", str(out_a)]) == 0
    capsys.readouterr()
    assert main(args + ["--out", str(out_b)]) == 0
    report_a = (out_a / "verify_report.json").read_bytes()
    report_b = (out_b / "verify_report.json").read_bytes()
    assert report_a == report_b
    report = json.loads(report_a)
    assert report["trials"] == 8
    assert 0 <= report["successes"] <= 8
    assert report["p_hat"] == report["successes"] / 8
    assert report["lo"] <= report["p_hat"] <= report["hi"]
    assert report["checkpoint"] == "checkpoint.ckpt"
    assert report["task"] == "reach"
    assert report["seed"] == 6
    assert report["greedy"] is False
    assert (out_a / "verify_interval.png").exists()


def test_verify_degenerate_single_episode(tmp_path, capsys):
    ckpt = trained_checkpoint(tmp_path)
    out = tmp_path / "v1"
    assert main(["verify", "--checkpoint", str(ckpt), "--n", "1", "--seed", "0",
                 "--out", str(out), "--workers", "1"]) == 0
    report = json.loads((out / "verify_report.json").read_text())
    assert report["trials"] == 1
    assert report["p_hat"] in (0.0, 1.0)
    assert report["half_width"] == 0.0


def test_verify_printed_numbers_match_report(tmp_path, capsys):
    ckpt = trained_checkpoint(tmp_path)
    capsys.readouterr()
    out = tmp_path / "v"
    assert main(["verify", "--checkpoint", str(ckpt), "--n", "6", "--seed", "1",
                 "--out", str(out), "--workers", "1"]) == 0
    stdout = capsys.readouterr().out
    report = json.loads((out / "verify_report.json").read_text())
    first = stdout.splitlines()[0].split()[1]
    assert first == f"{report['successes']}/{report['trials']}"
    p_hat_line = stdout.splitlines()[1].split()
    assert float(p_hat_line[1]) == report["p_hat"]
    assert float(p_hat_line[3]) == report["half_width"]


# ---------------------------------------------------------------------------
# Monitor
# ---------------------------------------------------------------------------


def test_monitor_golden_pair(capsys):
    code = main(["monitor", str(REPO_ROOT / "demo" / "spec.txt"),
                 str(REPO_ROOT / "demo" / "trace.jsonl")])
    out = capsys.readouterr().out
    assert code == 0
    assert out.splitlines() == ["robustness 0.375", "verdict satisfied"]


def test_monitor_violating_trace(tmp_path, capsys):
    spec = tmp_path / "s.txt"
    spec.write_text("dist(agent0, landmark0) < 0.1\n")
    trace = tmp_path / "t.jsonl"
    trace.write_text(json.dumps(
        {"t": 0, "entities": {"agent0": [0.0, 0.0], "landmark0": [1.0, 0.0]}}) + "\n")
    code = main(["monitor", str(spec), str(trace)])
    out = capsys.readouterr().out
    assert code == 1
    assert float(out.splitlines()[0].split()[1]) < 0
    assert "violated" in out


def test_monitor_spec_parse_error_reports_position(tmp_path, capsys):
    spec = tmp_path / "s.txt"
    spec.write_text("F[3,1] dist(agent0, landmark0) < 0.1\n")
    trace = REPO_ROOT / "demo" / "trace.jsonl"
    assert main(["monitor", str(spec), str(trace)]) == 2
    assert "window" in capsys.readouterr().err


def test_monitor_trace_too_short_for_spec(tmp_path, capsys):
    spec = tmp_path / "s.txt"
    spec.write_text("F[0,9] dist(agent0, landmark0) < 0.5\n")
    code = main(["monitor", str(spec), str(REPO_ROOT / "demo" / "trace.jsonl")])
    assert code == 2
    assert "trace does not fit" in capsys.readouterr().err


def test_monitor_missing_entity_in_trace(tmp_path, capsys):
    spec = tmp_path / "s.txt"
    spec.write_text("dist(agent7, landmark0) < 0.5\n")
    code = main(["monitor", str(spec), str(REPO_ROOT / "demo" / "trace.jsonl")])
    assert code == 2


# ---------------------------------------------------------------------------
# Module entry point
# ---------------------------------------------------------------------------


def test_module_invocation_smoke():
    proc = subprocess.run(
        [sys.executable, "-m", "stlmarl.cli", "monitor",
         str(REPO_ROOT / "demo" / "spec.txt"), str(REPO_ROOT / "demo" / "trace.jsonl")],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "robustness 0.375" in proc.stdout
