"""Eight-term shaped reward and per-episode randomised reward weights."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .env import StepEvents

# (low, high) sampling interval of each weight; penalties carry negative signs.
EWRI_RANGES: dict[str, tuple[float, float]] = {
    "lambda_c": (0.5, 1.5),
    "lambda_r": (-1.0, -0.2),
    "lambda_b": (-0.5, -0.1),
    "lambda_cam_usage": (0.2, 0.6),
    "lambda_cur": (0.2, 0.5),
    "lambda_collision": (-1.5, -0.8),
    "lambda_idle": (-0.8, -0.3),
    "lambda_llm": (0.2, 0.6),
}


@dataclass(frozen=True)
class RewardWeights:
    lambda_c: float
    lambda_r: float
    lambda_b: float
    lambda_cam_usage: float
    lambda_cur: float
    lambda_collision: float
    lambda_idle: float
    lambda_llm: float

    @classmethod
    def midpoint(cls, *, llm: bool = True) -> "RewardWeights":
        """Centre of every sampling interval; the fixed weights used outside training."""
        w = cls(**{k: (lo + hi) / 2 for k, (lo, hi) in EWRI_RANGES.items()})
        return w if llm else replace(w, lambda_llm=0.0)

    def without_llm(self) -> "RewardWeights":
        return replace(self, lambda_llm=0.0)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    def scaled(self, k: float) -> "RewardWeights":
        return RewardWeights(**{f.name: k * getattr(self, f.name) for f in fields(self)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RewardWeights":
        return cls(**{k: float(data[k]) for k in EWRI_RANGES})


def sample_ewri_weights(rng: np.random.Generator) -> RewardWeights:
    """Draw each weight uniformly from its interval."""
    return RewardWeights(**{k: float(rng.uniform(lo, hi)) for k, (lo, hi) in EWRI_RANGES.items()})


@dataclass(frozen=True)
class RewardBreakdown:
    delta_coverage: float
    redundant: float
    battery_pen: float
    cam_usage: float
    curiosity: float
    collision: float
    idle: float
    llm_shaping: float
    total: float

    def components(self) -> np.ndarray:
        return np.array([self.delta_coverage, self.redundant, self.battery_pen, self.cam_usage,
                         self.curiosity, self.collision, self.idle, self.llm_shaping])

    def to_dict(self) -> dict:
        return asdict(self)


def curiosity_bonus(prior_visits) -> float:
    """Mean of 1/sqrt(1 + n) over the observed cells' prior visit counts; 0 if nothing observed."""
    prior = np.asarray(prior_visits, dtype=float)
    if prior.size == 0:
        return 0.0
    return float(np.mean(1.0 / np.sqrt(1.0 + prior)))


def compute_reward(
    weights: RewardWeights,
    events: StepEvents,
    covered_before: int,
    covered_after: int,
    total_cells: int,
    camera_action_taken: bool,
    llm_shaping: float = 0.0,
) -> RewardBreakdown:
    """Assemble the weighted reward for one executed step.

    ``events.prior_visits`` supplies the visit counts that drive the
    curiosity term.  Penalty components are non-negative indicators or
    magnitudes; their weights carry the sign.
    """
    parts = (
        (covered_after - covered_before) / total_cells,
        1.0 if events.redundant else 0.0,
        float(events.battery_drain),
        1.0 if camera_action_taken and events.newly_covered > 0 else 0.0,
        curiosity_bonus(events.prior_visits),
        1.0 if events.collision else 0.0,
        1.0 if events.idle else 0.0,
        float(llm_shaping),
    )
    w = (weights.lambda_c, weights.lambda_r, weights.lambda_b, weights.lambda_cam_usage,
         weights.lambda_cur, weights.lambda_collision, weights.lambda_idle, weights.lambda_llm)
    total = math.fsum(wi * ci for wi, ci in zip(w, parts))
    return RewardBreakdown(*parts, total=total)
