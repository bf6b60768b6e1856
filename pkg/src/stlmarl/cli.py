"""Command line interface: train, eval, verify, and monitor.

Exit codes: 0 success (monitor: satisfied), 1 monitor violation, 2 bad
arguments, configuration, or parse errors, 3 IO and checkpoint errors,
4 training diverged.  Every printed number is recomputable from the files
the command writes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .config import (
    CONFIG_KEYS,
    ConfigError,
    RunConfig,
    build_task_specs,
    load_config,
    render_config,
)
from .model import TransformerPolicy, load_policy, policy_act_fn, save_policy
from .stl import (
    FormulaSyntaxError,
    conjoin,
    format_formula,
    load_trace,
    parse_formula,
    robustness,
)
from .tensor import CheckpointError, save_checkpoint
from .trainer import METRIC_COLUMNS, TrainingDiverged, train
from .verify import estimate_satisfaction, report_dict
from .world import GameConfig, run_episode, save_episode

EXIT_OK = 0
EXIT_VIOLATED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _write_metrics_csv(rows: list[dict], path) -> None:
    # repr keeps full float precision so a rerun diffs byte for byte
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([
                str(row["iteration"]),
                str(row["env_steps"]),
                repr(row["mean_robustness"]),
                repr(row["satisfaction_rate"]),
                repr(row["loss_enc_v"]),
                repr(row["loss_dec"]),
            ])


def _checkpoint_meta(config: RunConfig) -> dict:
    return {
        "game": asdict(config.game),
        "task": config.task,
        "task_formulas": [format_formula(f) for f in config.specs],
        "seed": config.seed,
    }


def _game_and_specs_from_meta(meta: dict, checkpoint: str):
    try:
        game = GameConfig(**meta["game"])
        formulas = meta["task_formulas"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{checkpoint}: meta lacks a usable game description: {exc}") from exc
    if len(formulas) != game.n_agents:
        raise CheckpointError(
            f"{checkpoint}: meta holds {len(formulas)} formulas for {game.n_agents} agents")
    try:
        specs = [parse_formula(text) for text in formulas]
    except FormulaSyntaxError as exc:
        raise CheckpointError(f"{checkpoint}: stored formula does not parse: {exc}") from exc
    return game, specs


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    config = load_config(args.config, overrides)
    out = config.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_config(config))
    meta = _checkpoint_meta(config)

    def on_iteration(iteration, row, policy):
        if config.checkpoint_every and iteration % config.checkpoint_every == 0:
            save_policy(policy, os.path.join(out, f"checkpoint_iter{iteration:04d}.ckpt"),
                        extra_meta=meta)

    try:
        result = train(config.game, config.specs, config.model, config.trainer,
                       on_iteration=on_iteration)
    except TrainingDiverged as exc:
        snapshot_path = os.path.join(out, "diverged.ckpt")
        save_checkpoint(snapshot_path, exc.snapshot, meta)
        print(f"training diverged: {exc}", file=sys.stderr)
        print(f"parameter snapshot written to {snapshot_path}", file=sys.stderr)
        return EXIT_DIVERGED

    _write_metrics_csv(result.metrics, os.path.join(out, "metrics.csv"))
    save_policy(result.policy, os.path.join(out, "checkpoint.ckpt"), extra_meta=meta)
    with open(os.path.join(out, "task_spec.txt"), "w", encoding="utf-8") as fh:
        for formula in config.specs:
            fh.write(format_formula(formula) + "\n")
    if result.metrics:
        from .plots import training_curves

        training_curves(result.metrics, os.path.join(out, "training_curves.png"))
        last = result.metrics[-1]
        print(f"trained {last['iteration']} iterations, {last['env_steps']} env steps")
        print(f"final mean robustness {last['mean_robustness']!r}, "
              f"satisfaction rate {last['satisfaction_rate']!r}")
    else:
        print("trained 0 iterations")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    policy, meta = load_policy(args.checkpoint)
    game, specs = _game_and_specs_from_meta(meta, args.checkpoint)
    out = args.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "task_spec.txt"), "w", encoding="utf-8") as fh:
        for formula in specs:
            fh.write(format_formula(formula) + "\n")
    spec = conjoin(specs)
    act = policy_act_fn(policy, greedy=args.greedy)
    values = []
    for k in range(args.episodes):
        record = run_episode(game, specs, act, [args.seed, k])
        save_episode(record, os.path.join(out, f"trace_{k:03d}.jsonl"))
        rho = robustness(spec, record.trajectory, 0)
        values.append(rho)
        verdict = "satisfied" if rho > 0.0 else "violated"
        print(f"episode {k}: robustness {rho!r} {verdict}")
        if k == 0:
            from .plots import episode_figure

            episode_figure(record, game, os.path.join(out, "eval_episode0.png"))
    rho = np.asarray(values)
    print(f"satisfied {int((rho > 0.0).sum())}/{rho.size} episodes")
    print(f"robustness mean {float(rho.mean())!r} min {float(rho.min())!r} "
          f"max {float(rho.max())!r}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    policy, meta = load_policy(args.checkpoint)
    game, specs = _game_and_specs_from_meta(meta, args.checkpoint)
    act = policy_act_fn(policy, greedy=args.greedy)
    result = estimate_satisfaction(
        game, specs, act, args.n, args.confidence, seed=args.seed,
        workers=args.workers)
    report = report_dict(
        result,
        seed=args.seed,
        greedy=bool(args.greedy),
        checkpoint=os.path.basename(args.checkpoint),
        task=meta.get("task", ""),
    )
    out = args.out
    os.makedirs(out, exist_ok=True)
    report_path = os.path.join(out, "verify_report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2) + "\n")
    from .plots import interval_figure

    interval_figure(result.estimate, os.path.join(out, "verify_interval.png"))
    est = result.estimate
    print(f"satisfied {est.successes}/{est.trials} episodes")
    print(f"p_hat {est.p_hat!r} half_width {est.half_width!r}")
    print(f"{est.confidence:g} confidence interval [{est.lo!r}, {est.hi!r}]")
    print(f"report written to {report_path}")
    return EXIT_OK


def cmd_monitor(args) -> int:
    try:
        with open(args.spec, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {args.spec!r}: {exc}") from exc
    lines = [line.split("#", 1)[0].strip() for line in text.splitlines()]
    lines = [line for line in lines if line]
    if not lines:
        raise ConfigError(f"spec file {args.spec!r} holds no formulas")
    formulas = [parse_formula(line) for line in lines]
    spec = conjoin(formulas)
    try:
        trajectory = load_trace(args.trace)
    except OSError as exc:
        raise ConfigError(f"cannot read trace {args.trace!r}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad trace {args.trace!r}: {exc}") from exc
    try:
        rho = robustness(spec, trajectory, 0)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"trace does not fit the spec: {exc}") from exc
    verdict = "satisfied" if rho > 0.0 else "violated"
    print(f"robustness {rho!r}")
    print(f"verdict {verdict}")
    return EXIT_OK if rho > 0.0 else EXIT_VIOLATED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stlmarl",
        description="Train, evaluate, verify, and monitor temporal-logic task policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy from a config file")
    p_train.add_argument("--config", required=True, help="path to a key = value config file")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="override the output directory")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="roll out a checkpoint and persist traces")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=8)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", default="eval")
    p_eval.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    p_eval.set_defaults(fn=cmd_eval)

    p_verify = sub.add_parser("verify", help="estimate satisfaction probability")
    p_verify.add_argument("--checkpoint", required=True)
    p_verify.add_argument("--n", type=int, default=2560, help="number of scoring episodes")
    p_verify.add_argument("--confidence", type=float, default=0.90)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--out", default="verify")
    p_verify.add_argument("--greedy", action="store_true")
    p_verify.add_argument("--workers", type=int, default=4)
    p_verify.set_defaults(fn=cmd_verify)

    p_monitor = sub.add_parser("monitor", help="check a recorded trace against a spec file")
    p_monitor.add_argument("spec", help="formula file, one formula per line (conjoined)")
    p_monitor.add_argument("trace", help="trace or episode JSON Lines file")
    p_monitor.set_defaults(fn=cmd_monitor)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormulaSyntaxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
