"""PPO training loop for the three learned methods.

``ppo-sr``    fixed mid-range reward weights, no advisor.
``ppo-ewri``  reward weights redrawn every episode, no advisor.
``pirl``      redrawn weights plus advisor-aligned reward shaping every step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Optional

import numpy as np

from .advisor import AdvisorContext, AdvisorError, CachedAdvisor, ReplayExhausted
from .env import Action, CoverageEnv, EnvConfig, EnvError
from .pare import AdviceUnparseable, AlignmentParams, build_prompt, llm_shaping
from .policy import (OBS_DIM, Adam, NonFiniteGradient, Rollout, encode_observation, forward, init_params,
                     log_softmax, ppo_update)
from .rewards import RewardWeights, compute_reward, sample_ewri_weights

log = logging.getLogger(__name__)

METHODS = ("pirl", "ppo-sr", "ppo-ewri")
CHECKPOINT_FORMAT = "pirl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    epochs_per_update: int = 4
    minibatch_size: int = 64
    rollout_length: int = 2048
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: Optional[float] = 0.5
    normalize_advantages: bool = True
    hidden_sizes: tuple[int, int] = (64, 64)
    total_episodes: int = 300
    seed: int = 0

    def __post_init__(self):
        self.hidden_sizes = tuple(self.hidden_sizes)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma!r}")
        if not self.clip_epsilon > 0:
            raise ValueError("clip_epsilon must be positive")
        for name in ("epochs_per_update", "minibatch_size", "rollout_length", "total_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.minibatch_size > self.rollout_length:
            raise ValueError("minibatch_size must not exceed rollout_length")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def episode_seed(base_seed: int, episode: int) -> int:
    """Per-episode environment seed; shared by every method given the same base seed."""
    return int(np.random.SeedSequence([int(base_seed), int(episode)]).generate_state(1)[0])


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    logp = log_softmax(logits)
    cdf = np.cumsum(np.exp(logp))
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    a = min(a, len(logits) - 1)
    return a, float(logp[a])


def _r(x: float) -> float:
    return round(float(x), 8)


@dataclass
class TrainResult:
    params: dict
    optimizer: Adam
    rng: np.random.Generator
    episodes: int
    mode: str
    config: TrainConfig
    env_config: EnvConfig
    alignment: AlignmentParams
    advisor_calls: int = 0
    history: list = field(default_factory=list)
    interrupted: bool = False


class _Writer:
    def __init__(self, path: Optional[Path]):
        self._fh: Optional[IO] = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict):
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()


def train(env_config: EnvConfig, advisor: Optional[CachedAdvisor], mode: str, cfg: TrainConfig,
          alignment: Optional[AlignmentParams] = None, log_path: Optional[Path] = None,
          trajectory_path: Optional[Path] = None) -> TrainResult:
    """Train a policy and write the per-episode / per-update JSONL log to ``log_path``.

    With a scripted advisor the whole run, log included, is a pure function
    of the configs and ``cfg.seed``.  KeyboardInterrupt ends training early
    with ``result.interrupted`` set; logs are flushed either way.
    """
    if mode not in METHODS:
        raise ValueError(f"mode must be one of {METHODS}, got {mode!r}")
    use_llm = mode == "pirl"
    if use_llm and advisor is None:
        raise ValueError("pirl mode needs an advisor")
    dims = env_config.dims
    alignment = (alignment or AlignmentParams()).for_grid(dims)

    rng = np.random.default_rng(cfg.seed)
    params = init_params(OBS_DIM, cfg.hidden_sizes, rng)
    optimizer = Adam(params, lr=cfg.learning_rate)
    env = CoverageEnv(env_config)
    rollout = Rollout()
    static_weights = RewardWeights.midpoint(llm=False)
    logw, trajw = _Writer(log_path), _Writer(trajectory_path)
    result = TrainResult(params, optimizer, rng, 0, mode, cfg, env_config, alignment)
    updates = 0

    def run_update(last_value: float):
        nonlocal params, rollout, updates
        rollout.finish(cfg.gamma, cfg.gae_lambda, last_value)
        record = {"kind": "update", "update": updates, "samples": len(rollout)}
        try:
            params, stats = ppo_update(params, optimizer, rollout, cfg, rng)
            record.update({k: _r(v) for k, v in asdict(stats).items()})
        except NonFiniteGradient as e:
            record["skipped"] = str(e)
        logw.write(record)
        result.history.append(record)
        updates += 1
        rollout = Rollout()

    try:
        for episode in range(cfg.total_episodes):
            if mode == "ppo-sr":
                weights = static_weights
            else:
                weights = sample_ewri_weights(rng)
                if not use_llm:
                    weights = weights.without_llm()
            state = env.reset(episode_seed(cfg.seed, episode))
            if advisor is not None:
                advisor.reset()
            calls_before = advisor.calls if advisor is not None else 0
            failures = 0
            ep_return = 0.0
            trajw.write({"kind": "reset", "episode": episode, "seed": env.seed, "state": state.to_dict(),
                         "obstacles": [o.to_dict() for o in env.obstacles]})
            obs = encode_observation(state, env.coverage, dims, env.obstacles)

            while not env.done:
                logits, values, _ = forward(params, obs)
                action, logp = sample_action(logits[0], rng)
                advice = None
                if use_llm:
                    prompt = build_prompt(state, env.coverage.fraction, dims, env.obstacles)
                    try:
                        advice = advisor.advise(prompt, AdvisorContext(state, env.coverage, env.obstacles,
                                                                       dims)).advice
                    except ReplayExhausted as e:
                        raise ReplayExhausted(f"episode {episode}, step {env.steps}: {e}") from e
                    except (AdvisorError, AdviceUnparseable) as e:
                        failures += 1
                        log.debug("episode %d step %d: advisor failed: %s", episode, env.steps, e)
                before = env.coverage.covered_count
                prev = state
                try:
                    state, events = env.step(Action(action))
                except EnvError as e:
                    raise type(e)(f"episode {episode}, step {env.steps}: {e}") from e
                shaping = llm_shaping(alignment, state, prev, advice, dims) if use_llm else 0.0
                reward = compute_reward(weights, events, before, env.coverage.covered_count,
                                        dims.ground_cells, not Action(action).is_move, shaping)
                ep_return += reward.total
                done = env.done
                rollout.add(obs, action, logp, values[0], reward.total, done)
                trajw.write({"kind": "step", "episode": episode, "step": env.steps,
                             "action": Action(action).label, "state": state.to_dict(),
                             "events": events.to_dict(), "reward": reward.to_dict(),
                             "advice": advice.render() if advice else None})
                obs = encode_observation(state, env.coverage, dims, env.obstacles)
                if len(rollout) >= cfg.rollout_length:
                    last_value = 0.0 if done else float(forward(params, obs)[1][0])
                    run_update(last_value)

            calls = (advisor.calls - calls_before) if advisor is not None else 0
            result.advisor_calls += calls
            cov = env.coverage
            record = {
                "kind": "episode", "episode": episode, "steps": env.steps,
                "return": _r(ep_return), "mean_reward": _r(ep_return / max(env.steps, 1)),
                "vcr": _r(cov.fraction),
                "rvc": _r(float((cov.visit_count > 1).sum()) / cov.covered_count if cov.covered_count else 0.0),
                "battery": _r(env.state.battery),
                "advisor_calls": calls, "advisor_failures": failures,
                "weights": {k: _r(v) for k, v in weights.to_dict().items()},
            }
            logw.write(record)
            result.history.append(record)
            result.episodes = episode + 1

        if len(rollout) >= cfg.minibatch_size:
            run_update(0.0)
    except KeyboardInterrupt:
        # keep what has been learned so far; the caller decides whether to checkpoint
        log.warning("training interrupted after %d episodes", result.episodes)
        result.interrupted = True
    finally:
        logw.close()
        trajw.close()

    result.params = params
    return result


# --- checkpoints ---------------------------------------------------------------

def _arrays_to_lists(d: dict) -> dict:
    return {k: np.asarray(v).tolist() for k, v in sorted(d.items())}


def save_checkpoint(path: Path, result: TrainResult):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "mode": result.mode,
        "obs_dim": OBS_DIM,
        "episodes": result.episodes,
        "train_config": result.config.to_dict(),
        "env_config": result.env_config.to_dict(),
        "alignment": result.alignment.to_dict(),
        "params": _arrays_to_lists(result.params),
        "optimizer": {"t": result.optimizer.t, "lr": result.optimizer.lr,
                      "m": _arrays_to_lists(result.optimizer.m), "v": _arrays_to_lists(result.optimizer.v)},
        "rng_state": result.rng.bit_generator.state,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    mode: str
    params: dict
    train_config: TrainConfig
    env_config: EnvConfig
    alignment: AlignmentParams
    episodes: int
    obs_dim: int


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT}")
    params = {k: np.asarray(v, dtype=float) for k, v in data["params"].items()}
    obs_dim = int(data.get("obs_dim", params["w1"].shape[0]))
    if obs_dim != OBS_DIM or params["w1"].shape[0] != OBS_DIM:
        raise CheckpointError(f"checkpoint expects {obs_dim}-dim observations, this build produces {OBS_DIM}")
    al = data.get("alignment", {})
    env_config = EnvConfig.from_dict(data["env_config"])
    return Checkpoint(
        mode=data["mode"], params=params,
        train_config=TrainConfig.from_dict(data["train_config"]),
        env_config=env_config,
        alignment=AlignmentParams(**al).for_grid(env_config.dims),
        episodes=int(data["episodes"]), obs_dim=obs_dim,
    )
