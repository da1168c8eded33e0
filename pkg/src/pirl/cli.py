"""``pirl`` command line: train, eval, prompt and replay.

Configuration is a JSON file with optional sections ``env``, ``train``,
``alignment`` and ``advisor`` plus top-level ``method``, ``seed`` and
``out``.  Flags override file values.  Every command writes the effective
configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .advisor import AdvisorError, make_advisor
from .env import ConfigInvalid, EnvConfig, GridDims, Obstacle, UavState
from .evaluation import (METHOD_LABELS, LlmOnlyController, PolicyController, evaluate, report_to_dict,
                         scale_factor, write_summary_csv)
from .pare import AlignmentParams, build_prompt
from .train import METHODS, CheckpointError, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("pirl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INTERRUPTED = 0, 1, 2, 130
ADVISOR_KINDS = ("scripted", "http", "replay")
RUN_KEYS = {"method", "seed", "out", "env", "train", "alignment", "advisor"}


class UsageError(Exception):
    """Bad input from the user; reported with exit code 2."""


@dataclass
class RunConfig:
    method: str = "pirl"
    seed: int = 0
    out: str = "runs/pirl"
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    alignment: AlignmentParams = field(default_factory=AlignmentParams)
    advisor: dict = field(default_factory=lambda: {"kind": "scripted", "interval": 1})

    def to_dict(self) -> dict:
        return {"method": self.method, "seed": self.seed, "out": self.out, "env": self.env.to_dict(),
                "train": self.train.to_dict(), "alignment": self.alignment.to_dict(),
                "advisor": dict(self.advisor)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - RUN_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        try:
            if "env" in data:
                cfg.env = EnvConfig.from_dict(data["env"])
            if "train" in data:
                cfg.train = TrainConfig.from_dict(data["train"])
            if "alignment" in data:
                cfg.alignment = AlignmentParams(**data["alignment"])
        except (TypeError, ValueError) as e:
            raise UsageError(f"invalid config: {e}") from e
        cfg.method = data.get("method", cfg.method)
        cfg.seed = int(data.get("seed", cfg.seed))
        cfg.out = str(data.get("out", cfg.out))
        if "advisor" in data:
            cfg.advisor = {**cfg.advisor, **data["advisor"]}
        return cfg


def read_json(path: Path, what: str = "config") -> dict:
    if not path.is_file():
        raise UsageError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot parse {what} file {path}: {e}") from e


def write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_dict(read_json(Path(args.config))) if args.config else RunConfig()
    if args.method is not None:
        cfg.method = args.method
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.train.seed = cfg.seed
    cfg.env.seed = cfg.seed
    if args.out is not None:
        cfg.out = args.out
    if args.advisor is not None:
        cfg.advisor["kind"] = args.advisor
    if args.advisor_interval is not None:
        cfg.advisor["interval"] = args.advisor_interval
    if cfg.advisor.get("kind") not in ADVISOR_KINDS:
        raise UsageError(f"advisor kind must be one of {ADVISOR_KINDS}, got {cfg.advisor.get('kind')!r}")
    if int(cfg.advisor.get("interval", 1)) < 1:
        raise UsageError("advisor interval must be >= 1")
    try:
        if args.grid is not None:
            cfg.env.dims = GridDims.parse(args.grid)
        cfg.env.validate()
    except ConfigInvalid as e:
        raise UsageError(f"invalid environment: {e}") from e
    return cfg


def build_advisor(spec: dict, record_path: Optional[Path] = None):
    spec = dict(spec)
    if record_path is not None and spec.get("kind") != "replay":
        record_path.write_text("", encoding="utf-8")
        spec["record_path"] = str(record_path)
    try:
        return make_advisor(spec)
    except (OSError, ValueError) as e:
        raise UsageError(f"invalid advisor spec: {e}") from e


# --- commands ----------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if cfg.method not in METHODS:
        raise UsageError(f"train --method must be one of {METHODS}, got {cfg.method!r}")
    if args.episodes is not None:
        cfg.train.total_episodes = args.episodes
    return run_training(cfg, trajectories=args.trajectories)


def run_training(cfg: RunConfig, trajectories: bool = False) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    advisor = build_advisor(cfg.advisor, out / "advice.jsonl") if cfg.method == "pirl" else None
    log.info("training %s on %s for %d episodes -> %s", cfg.method, cfg.env.dims, cfg.train.total_episodes, out)
    result = train(cfg.env, advisor, cfg.method, cfg.train, cfg.alignment,
                   log_path=out / "train_log.jsonl",
                   trajectory_path=out / "trajectory.jsonl" if trajectories else None)
    save_checkpoint(out / "checkpoint.json", result)
    if result.interrupted:
        log.warning("interrupted; checkpoint after %d episodes written to %s", result.episodes, out)
        return EXIT_INTERRUPTED
    log.info("done: %d episodes, %d advisor calls", result.episodes, result.advisor_calls)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    """Re-run a recorded training run, serving advisor replies from its advice file."""
    src = Path(args.source)
    data = read_json(src / "config.json")
    cfg = RunConfig.from_dict(data)
    if cfg.method != "pirl":
        raise UsageError(f"{src} is a {cfg.method} run; only pirl runs query an advisor")
    record = src / "advice.jsonl"
    if not record.is_file():
        raise UsageError(f"advice file not found: {record}")
    cfg.advisor = {"kind": "replay", "path": str(record), "interval": cfg.advisor.get("interval", 1)}
    cfg.out = args.out or str(src / "replay")
    return run_training(cfg, trajectories=args.trajectories)


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_dict(read_json(Path(args.config))) if args.config else RunConfig()
    method = args.method or cfg.method
    if method not in METHOD_LABELS:
        raise UsageError(f"unknown method {method!r}")
    if method == "llm-only":
        train_env = cfg.env
        controller = None
    else:
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for method {method}")
        try:
            ckpt = load_checkpoint(Path(args.checkpoint))
        except CheckpointError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_FAIL
        train_env = ckpt.env_config
        cfg.alignment = ckpt.alignment
        controller = PolicyController(ckpt.params, method)

    try:
        test_dims = GridDims.parse(args.grid) if args.grid else train_env.dims
    except ConfigInvalid as e:
        raise UsageError(str(e)) from e
    alpha = scale_factor(train_env.dims, test_dims)
    env_config = train_env.scaled_to(test_dims)
    if args.advisor is not None:
        cfg.advisor["kind"] = args.advisor
    if args.advisor_interval is not None:
        cfg.advisor["interval"] = args.advisor_interval
    if controller is None:
        controller = LlmOnlyController(build_advisor(cfg.advisor))

    base_seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{method}_{test_dims}"
    write_json(out / f"eval_config_{tag}.json", {
        "method": method, "checkpoint": args.checkpoint, "base_seed": base_seed, "episodes": args.episodes,
        "scale_factor": alpha, "env": env_config.to_dict(), "alignment": cfg.alignment.to_dict(),
        "advisor": cfg.advisor if method == "llm-only" else None,
    })
    log.info("evaluating %s on %s (alpha=%g, %d steps) for %d episodes", method, test_dims, alpha,
             env_config.max_steps, args.episodes)
    report = evaluate(controller, env_config, args.episodes, base_seed,
                      trajectory_path=out / f"trajectory_{tag}.jsonl", alignment=cfg.alignment)
    write_summary_csv(out / f"metrics_{tag}.csv", [report])
    write_json(out / f"report_{tag}.json", report_to_dict(report))
    row = report.summary_row()
    print(f"{row['method']} {row['grid']}: VCR {row['vcr']:.4f}  BE {row['be']:.4f}  RVC {row['rvc']:.4f}")
    return EXIT_OK


def parse_state(text: str) -> dict:
    """Accept a JSON literal, a path to a JSON file, or ``-`` for stdin."""
    if text == "-":
        text = sys.stdin.read()
    elif not text.lstrip().startswith("{"):
        return read_json(Path(text), "state")
    try:
        return json.loads(text)
    except ValueError as e:
        raise UsageError(f"state is not valid JSON: {e}") from e


def prompt_from_state(data: dict) -> str:
    """Validate a state mapping and render its prompt.

    Keys: ``position``, ``camera`` {tilt, pan, zoom}, ``battery``,
    ``coverage`` (fraction), optional ``grid`` ("15x15x3") and ``obstacles``
    [{center, radius}].
    """
    try:
        dims = GridDims.parse(str(data.get("grid", "15x15x3")))
        if "position" not in data:
            raise ConfigInvalid("position is required")
        cam = data.get("camera", {})
        for k in ("tilt", "pan", "zoom"):
            if k in cam and not isinstance(cam[k], (int, float)):
                raise ConfigInvalid(f"{k} must be a number, got {cam[k]!r}")
        state = UavState.from_dict(data)
        if len(state.position) != 3 or not dims.contains(state.position):
            raise ConfigInvalid(f"position {list(state.position)} outside grid {dims}")
        if not 0.0 <= state.battery <= 1.0:
            raise ConfigInvalid(f"battery must be in [0, 1], got {state.battery!r}")
        coverage = float(data.get("coverage", 0.0))
        if not 0.0 <= coverage <= 1.0:
            raise ConfigInvalid(f"coverage must be in [0, 1], got {coverage!r}")
        obstacles = [Obstacle.from_dict(o) for o in data.get("obstacles", [])]
    except ConfigInvalid as e:
        raise UsageError(f"invalid state: {e}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"invalid state: {e!r}") from e
    return build_prompt(state, coverage, dims, obstacles)


def cmd_prompt(args: argparse.Namespace) -> int:
    sys.stdout.write(prompt_from_state(parse_state(args.state)) + "\n")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pirl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method_choices):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--method", choices=method_choices)
        p.add_argument("--grid", help="grid size as XxYxZ, e.g. 30x30x3")
        p.add_argument("--advisor", choices=ADVISOR_KINDS)
        p.add_argument("--advisor-interval", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a policy")
    common(p, METHODS)
    p.add_argument("--episodes", type=int, help="training episodes")
    p.add_argument("--trajectories", action="store_true", help="also write per-step trajectory JSONL")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the LLM-only baseline")
    common(p, tuple(METHOD_LABELS))
    p.add_argument("--checkpoint", help="checkpoint from `pirl train` (not needed for llm-only)")
    p.add_argument("--episodes", type=int, default=20, help="evaluation episodes (default 20)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prompt", help="print the advisor prompt for a state")
    p.add_argument("state", help="state as a JSON literal, a JSON file path, or - for stdin")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("replay", help="re-run a pirl training run from its recorded advice")
    p.add_argument("source", help="output directory of the recorded run")
    p.add_argument("--out", help="output directory (default SOURCE/replay)")
    p.add_argument("--trajectories", action="store_true")
    p.set_defaults(func=cmd_replay)
    return parser


def _raise_interrupt(signum, frame):
    raise KeyboardInterrupt


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    previous = signal.signal(signal.SIGTERM, _raise_interrupt)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AdvisorError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED
    finally:
        signal.signal(signal.SIGTERM, previous)


if __name__ == "__main__":
    sys.exit(main())
