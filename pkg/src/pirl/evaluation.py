"""Coverage metrics and paired-seed evaluation of trained policies and baselines."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol

import numpy as np

from .advisor import AdvisorContext, AdvisorError, CachedAdvisor
from .env import (MOVE_DELTAS, PAN_STEP, TILT_STEP, ZOOM_STEP, Action, CoverageEnv, CoverageMap, EnvConfig,
                  GridDims, UavState, apply_camera_action)
from .pare import Advice, AdviceUnparseable, AlignmentParams, build_prompt, llm_shaping
from .policy import encode_observation, forward
from .rewards import RewardWeights, compute_reward
from .train import episode_seed

METHOD_LABELS = {"pirl": "PIRL", "ppo-sr": "PPO-SR", "ppo-ewri": "PPO-EWRI", "llm-only": "LLM-only"}


class InvalidBattery(ValueError):
    pass


def vcr(coverage: CoverageMap) -> float:
    return coverage.covered_count / coverage.total


def battery_efficiency(vcr_value: float, b_i: float, b_t: float) -> float:
    """Coverage per unit battery: VCR / (2 - b_t / b_i)."""
    if not b_i > 0 or not 0 <= b_t <= b_i:
        raise InvalidBattery(f"need b_i > 0 and 0 <= b_t <= b_i, got b_i={b_i!r}, b_t={b_t!r}")
    return vcr_value / (2.0 - b_t / b_i)


def rvc(coverage: CoverageMap) -> float:
    """Cells seen more than once per covered cell."""
    if coverage.covered_count == 0:
        return 0.0
    return int((coverage.visit_count > 1).sum()) / coverage.covered_count


def scale_factor(train: GridDims, test: GridDims) -> float:
    """Test-to-train volume ratio used to stretch step and battery budgets."""
    return test.volume / train.volume


@dataclass
class EpisodeMetrics:
    vcr: float
    be: float
    rvc: float
    steps_used: int
    battery_initial: float
    battery_final: float
    seed: int
    episode: int = 0


@dataclass
class EvalReport:
    method: str
    grid: str
    episodes: list[EpisodeMetrics] = field(default_factory=list)

    @property
    def mean_vcr(self) -> float:
        return float(np.mean([e.vcr for e in self.episodes]))

    @property
    def mean_be(self) -> float:
        return float(np.mean([e.be for e in self.episodes]))

    @property
    def mean_rvc(self) -> float:
        return float(np.mean([e.rvc for e in self.episodes]))

    def summary_row(self) -> dict:
        return {"method": METHOD_LABELS.get(self.method, self.method), "grid": self.grid,
                "episodes": len(self.episodes), "vcr": round(self.mean_vcr, 6),
                "be": round(self.mean_be, 6), "rvc": round(self.mean_rvc, 6)}


def write_summary_csv(path: Path, reports: Iterable[EvalReport]):
    rows = [r.summary_row() for r in reports]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "grid", "episodes", "vcr", "be", "rvc"])
        writer.writeheader()
        writer.writerows(rows)


# --- controllers -------------------------------------------------------------

class Controller(Protocol):
    method: str

    def reset(self) -> None: ...

    def act(self, env: CoverageEnv) -> tuple[Optional[Action], Optional[Advice]]: ...


class PolicyController:
    """Greedy (argmax) action from a trained network."""

    def __init__(self, params: dict, method: str = "pirl"):
        self.params = params
        self.method = method

    def reset(self):
        pass

    def act(self, env: CoverageEnv):
        obs = encode_observation(env.state, env.coverage, env.dims, env.obstacles)
        logits, _, _ = forward(self.params, obs)
        return Action(int(np.argmax(logits[0]))), None


def _camera_steps(a, b) -> float:
    return (abs(a.tilt - b.tilt) / TILT_STEP + abs(a.pan - b.pan) / PAN_STEP
            + abs(a.zoom - b.zoom) / ZOOM_STEP)


def llm_only_action(state: UavState, advice: Advice, dims: GridDims) -> Optional[Action]:
    """Atomic action closing the gap to the advised state, or ``None`` if already there.

    Position is matched first, then the camera.  Gaps are counted in
    atomic steps; ties go to the earlier action in the action order.
    """
    target = advice.target_position(state.position, dims)
    if tuple(state.position) != tuple(target):
        def gap(a):
            d = MOVE_DELTAS[a]
            p = dims.clamp([c + dc for c, dc in zip(state.position, d)])
            return sum(abs(x - y) for x, y in zip(p, target))
        return min(MOVE_DELTAS, key=lambda a: (gap(a), int(a)))
    goal = advice.camera_target
    current = _camera_steps(state.camera, goal)
    if current < 1e-9:
        return None
    cams = [a for a in Action if not a.is_move]
    return min(cams, key=lambda a: (round(_camera_steps(apply_camera_action(state.camera, a), goal), 9), int(a)))


class LlmOnlyController:
    """Drive the UAV directly from advisor output, with no policy network."""

    method = "llm-only"

    def __init__(self, advisor: CachedAdvisor):
        self.advisor = advisor

    def reset(self):
        self.advisor.reset()

    def act(self, env: CoverageEnv):
        state = env.state
        prompt = build_prompt(state, env.coverage.fraction, env.dims, env.obstacles)
        try:
            advice = self.advisor.advise(prompt, AdvisorContext(state, env.coverage, env.obstacles,
                                                                env.dims)).advice
        except (AdvisorError, AdviceUnparseable):
            return None, None
        return llm_only_action(state, advice, env.dims), advice


# --- evaluation loop -------------------------------------------------------------

def evaluate(controller: Controller, env_config: EnvConfig, n_episodes: int, base_seed: int = 0,
             trajectory_path: Optional[Path] = None, alignment: Optional[AlignmentParams] = None) -> EvalReport:
    """Run ``n_episodes`` with per-episode seeds derived from ``base_seed``.

    Every method evaluated with the same base seed sees the same obstacle
    layouts and start states.  Rewards in the trajectory log use the
    mid-range weights.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    dims = env_config.dims
    alignment = (alignment or AlignmentParams()).for_grid(dims)
    weights = RewardWeights.midpoint(llm=True)
    env = CoverageEnv(env_config)
    report = EvalReport(controller.method, str(dims))
    fh = open(trajectory_path, "w", encoding="utf-8") if trajectory_path else None
    try:
        for ep in range(n_episodes):
            seed = episode_seed(base_seed, ep)
            try:
                state = env.reset(seed)
                controller.reset()
                if fh:
                    fh.write(json.dumps({"kind": "reset", "method": controller.method, "episode": ep,
                                         "seed": seed, "state": state.to_dict(),
                                         "obstacles": [o.to_dict() for o in env.obstacles]},
                                        sort_keys=True) + "\n")
                b_i = state.battery
                while not env.done:
                    action, advice = controller.act(env)
                    prev = env.state
                    before = env.coverage.covered_count
                    state, events = env.step(action)
                    if fh:
                        shaping = llm_shaping(alignment, state, prev, advice, dims)
                        reward = compute_reward(weights, events, before, env.coverage.covered_count,
                                                dims.ground_cells, action is not None and not action.is_move,
                                                shaping)
                        fh.write(json.dumps({"kind": "step", "method": controller.method, "episode": ep,
                                             "step": env.steps, "action": action.label if action is not None
                                             else "hold", "state": state.to_dict(),
                                             "events": events.to_dict(), "reward": reward.to_dict(),
                                             "advice": advice.render() if advice else None},
                                            sort_keys=True) + "\n")
            except Exception as e:
                raise RuntimeError(f"evaluation episode {ep} (seed {seed}) failed: {e}") from e
            v = vcr(env.coverage)
            report.episodes.append(EpisodeMetrics(
                vcr=v, be=battery_efficiency(v, b_i, env.state.battery), rvc=rvc(env.coverage),
                steps_used=env.steps, battery_initial=b_i, battery_final=env.state.battery,
                seed=seed, episode=ep))
    finally:
        if fh:
            fh.close()
    return report


def recount_from_trajectory(path: Path) -> dict[tuple[str, int], EpisodeMetrics]:
    """Recompute per-episode metrics from a trajectory JSONL by replaying observed-cell lists."""
    episodes: dict[tuple[str, int], dict] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        key = (rec.get("method", ""), rec["episode"])
        if rec["kind"] == "reset":
            episodes[key] = {"seed": rec["seed"], "visits": {}, "b_i": rec["state"]["battery"],
                             "b_t": rec["state"]["battery"], "steps": 0}
        elif rec["kind"] == "step":
            ep = episodes[key]
            for i, j in rec["events"]["observed"]:
                ep["visits"][(i, j)] = ep["visits"].get((i, j), 0) + 1
            ep["b_t"] = rec["state"]["battery"]
            ep["steps"] = rec["step"]
    return episodes


def metrics_from_recount(ep: dict, total_cells: int) -> EpisodeMetrics:
    covered = len(ep["visits"])
    multi = sum(1 for n in ep["visits"].values() if n > 1)
    v = covered / total_cells
    return EpisodeMetrics(vcr=v, be=battery_efficiency(v, ep["b_i"], ep["b_t"]),
                          rvc=multi / covered if covered else 0.0, steps_used=ep["steps"],
                          battery_initial=ep["b_i"], battery_final=ep["b_t"], seed=ep["seed"])


def report_to_dict(report: EvalReport) -> dict:
    return {"method": report.method, "grid": report.grid,
            "means": {"vcr": report.mean_vcr, "be": report.mean_be, "rvc": report.mean_rvc},
            "episodes": [asdict(e) for e in report.episodes]}
