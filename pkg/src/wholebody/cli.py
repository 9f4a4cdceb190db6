"""Command-line entry points.

Subcommands: collect, train, eval, replay, oracle-gen, teleop-serve,
inspect.  All randomness is seeded through flags; failures exit non-zero
with a machine-readable ``error-category:`` line on stderr.  The dataset
root defaults to the WHOLEBODY_DATA_ROOT environment variable.

Exit codes: 0 success, 2 usage/config, 3 data, 4 checkpoint, 5 runtime
fault.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datastore as DS
from . import kinematics as K
from . import simenv as S
from . import trainer as TR
from .errors import WholeBodyError

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_RUNTIME = 5


class CliError(Exception):
    def __init__(self, message: str, category: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def _data_root(args) -> Path:
    root = args.data_root or os.environ.get("WHOLEBODY_DATA_ROOT", "data")
    return Path(root)


def _load_model(args) -> K.RobotModel:
    if args.model:
        return K.load_model(args.model)
    return K.load_r1_model()


def _load_task(args) -> S.WipeTaskConfig:
    if args.config:
        try:
            return S.WipeTaskConfig.from_yaml(args.config)
        except (OSError, TypeError, ValueError, KeyError) as e:
            raise CliError(f"bad task config: {e}", "config", EXIT_USAGE) from e
    return S.WipeTaskConfig()


def _dataset_paths(directory: Path) -> list:
    paths = sorted(Path(directory).glob("*.traj"))
    if not paths:
        raise CliError(f"no trajectories under {directory}", "data", EXIT_DATA)
    return paths


def cmd_oracle_gen(args) -> int:
    model = _load_model(args)
    task = _load_task(args)
    out = Path(args.out or _data_root(args) / "oracle")
    out.mkdir(parents=True, exist_ok=True)
    written, failures, seed = 0, 0, args.seed
    while written < args.count:
        env = S.WipeEnv(model, task)
        try:
            traj = S.oracle_demonstrate(env, seed)
        except WholeBodyError:
            failures += 1
            seed += 1
            continue
        DS.save_trajectory(out / f"oracle-{seed:06d}.traj", traj)
        written += 1
        seed += 1
        if args.progress and written % 100 == 0:
            print(f"{written}/{args.count} demonstrations", flush=True)
    manifest = {"count": written, "oracle_failures": failures,
                "first_seed": args.seed, "task": task.__dict__,
                "model_checksum": model.checksum}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, default=list)
    print(f"wrote {written} trajectories to {out} ({failures} oracle failures)")
    return 0


def cmd_train(args) -> int:
    cfg = (TR.TrainConfig.from_yaml(args.config) if args.config
           else TR.TrainConfig())
    if args.steps:
        cfg.steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    if args.variant:
        cfg.variant = args.variant
    paths = _dataset_paths(Path(args.data or _data_root(args) / "oracle"))
    out = Path(args.out or "runs/train")
    try:
        _, history = TR.train(paths, cfg, out)
    except ValueError as e:
        raise CliError(str(e), "config", EXIT_USAGE) from e
    first = float(np.mean(history["train_loss"][:20]))
    last = float(np.mean(history["train_loss"][-100:]))
    print(f"loss {first:.4f} -> {last:.4f} over {cfg.steps} steps; "
          f"checkpoint at {out / 'policy.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    from .policy import WholeBodyPolicy
    model = _load_model(args)
    task = _load_task(args)
    try:
        policy = WholeBodyPolicy.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot load checkpoint: {e}", "checkpoint",
                       EXIT_CHECKPOINT) from e
    results = TR.evaluate_policy(policy, model, task, args.rollouts,
                                 seed_base=args.seed,
                                 execute_horizon=args.execute_horizon)
    wins = sum(r.success for r in results)
    report = {
        "success_rate": wins / len(results),
        "rollouts": len(results),
        "violations": sum(r.violations for r in results),
        "mean_episode_steps": float(np.mean([r.policy_steps for r in results])),
    }
    print(json.dumps(report, indent=1))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(report, f, indent=1)
    return 0


def cmd_replay(args) -> int:
    model = _load_model(args)
    task = _load_task(args)
    try:
        traj = DS.load_trajectory(args.trajectory)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load trajectory: {e}", "data", EXIT_DATA) from e
    try:
        report = DS.replay(traj, S.WipeEnv(model, task))
    except WholeBodyError as e:
        raise CliError(str(e), "data", EXIT_DATA) from e
    print(json.dumps({
        "success": report.success,
        "recorded_success": report.recorded_success,
        "bit_identical": report.bit_identical,
        "max_joint_deviation": report.max_joint_deviation,
        "safety_violations": report.safety_violations,
        "steps": report.steps,
    }, indent=1))
    return 0


def cmd_collect(args) -> int:
    from .bridge import TeleopDriver, gamepad_from_payload
    model = _load_model(args)
    task = _load_task(args)
    out = Path(args.out or _data_root(args) / "teleop")
    if args.input_log is None:
        raise CliError("scripted collection needs --input-log (use "
                       "teleop-serve for live sessions)", "usage", EXIT_USAGE)
    driver = TeleopDriver(S.WipeEnv(model, task), out, seed=args.seed)
    try:
        with open(args.input_log) as f:
            events = [json.loads(line) for line in f if line.strip()]
    except (OSError, ValueError) as e:
        raise CliError(f"bad input log: {e}", "data", EXIT_DATA) from e
    events.sort(key=lambda e: e["t"])
    end_tick = max(e["t"] for e in events) + 1
    idx = 0
    for tick in range(end_tick):
        while idx < len(events) and events[idx]["t"] == tick:
            ev = events[idx]
            if "command" in ev:
                driver.apply_command(gamepad_from_payload(ev["command"]))
            if "record" in ev:
                result = driver.record_ctl(ev["record"])
                if "error" in result:
                    raise CliError(result["error"], "data", EXIT_DATA)
            idx += 1
        driver.control_tick()
        if driver.fault:
            raise CliError("plant fault during scripted collection",
                           "fault", EXIT_RUNTIME)
    for path in driver.saved_paths:
        print(path)
    print(f"collected {len(driver.saved_paths)} trajectories over "
          f"{end_tick} ticks")
    return 0


def cmd_teleop_serve(args) -> int:
    from .bridge import BridgeConfig, serve_teleop
    model = _load_model(args)
    task = _load_task(args)
    cfg = BridgeConfig(port=args.port, seed=args.seed)
    print(f"serving teleoperation on ws://{cfg.host}:{cfg.port} "
          f"(schema {1}, data root {_data_root(args)})", flush=True)
    serve_teleop(model, task, _data_root(args) / "teleop", cfg)
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise CliError(f"no such file: {path}", "data", EXIT_DATA)
    raw = path.open("rb").read(4)
    if raw == b"WBTJ":
        traj = DS.load_trajectory(path)
        print(json.dumps({
            "type": "trajectory",
            "header": traj.header.to_dict(),
            "steps": len(traj),
            "blobs": len(traj.blobs),
            "outcome": traj.outcome,
            "subtask_success": traj.subtask_success,
        }, indent=1))
    elif raw == b"WBCK":
        from .numerics.checkpoint import load_checkpoint
        tensors, meta = load_checkpoint(path)
        print(json.dumps({
            "type": "checkpoint",
            "tensors": len(tensors),
            "parameters": int(sum(int(np.prod(t.shape)) for t in tensors.values())),
            "meta": {k: v for k, v in meta.items() if k != "schedule"},
        }, indent=1))
    else:
        raise CliError(f"unrecognized file magic {raw!r}", "data", EXIT_DATA)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wholebody",
        description="Whole-body teleoperation and policy-learning toolkit")
    parser.add_argument("--data-root", default=None,
                        help="dataset root (default: $WHOLEBODY_DATA_ROOT or ./data)")
    parser.add_argument("--model", default=None,
                        help="robot model file (default: shipped canonical model)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle-gen", help="bulk scripted demonstrations")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_oracle_gen)

    p = sub.add_parser("train", help="train a policy on a dataset directory")
    p.add_argument("--config", default=None, help="training config yaml")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default=None,
                   choices=["full", "no_wb_decoding", "no_obs_attention"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--rollouts", type=int, default=20)
    p.add_argument("--seed", type=int, default=50_000)
    p.add_argument("--execute-horizon", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="open-loop replay of a trajectory")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("collect", help="scripted data collection from an input log")
    p.add_argument("--config", default=None)
    p.add_argument("--input-log", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("teleop-serve", help="serve the websocket teleop bridge")
    p.add_argument("--config", default=None)
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_teleop_serve)

    p = sub.add_parser("inspect", help="print trajectory or checkpoint headers")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        print(f"error-category: {e.category}", file=sys.stderr)
        return e.code
    except WholeBodyError as e:
        print(f"error: {e}", file=sys.stderr)
        print("error-category: fault", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
