"""Prompt-adaptive reward shaping.

Builds the structured zero-shot prompt sent to the advisor, parses its
free-text recommendation into an :class:`Advice`, and scores how closely the
agent's next state follows that advice.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .env import (PAN_MAX, PAN_MIN, TILT_MAX, TILT_MIN, ZOOM_MAX, ZOOM_MIN, CameraConfig, GridDims,
                  Obstacle, UavState)

# Constants echoed in the prompt's camera_params; they play no role in the dynamics.
FIELD_OF_VIEW = 90.0
RESOLUTION = 1.0

TASK_HEADER = "[Task Description]"
ENV_HEADER = "[Environment Summary]"
QUERY_HEADER = "[Request Template]"

TASK_TEXT = (
    "You are a drone controller fitted with a gimbal-mounted camera tasked with maximizing visual "
    "ground coverage within a 3D environment. Suggest movements in the 3D space (X, Y, Z) and camera "
    "adjustments (pan, tilt, zoom) that enhance visual ground coverage while minimizing battery "
    "consumption, avoiding obstacles, and reducing redundant observations."
)

ENV_TEXT = (
    "Drone state: {state}. The drone is currently operating in a {grid} grid environment and has "
    "visually covered a portion of the ground-level cells using its camera. The camera params in the "
    "drone state are listed in order as: field of view (degrees), resolution, tilt (degrees), pan "
    "(degrees), and zoom. The camera emits a downward-facing square view cone projected onto the ground "
    "level (z=0), centered on the drone’s current (x, y) location. The size of the view cone is "
    "determined by the zoom level and tilt angle. If tilt < 80, the cone has a half-width of "
    "approximately 2×zoom units in both x and y directions; otherwise, it is 1×zoom. "
)

QUERY_RULES = (
    "1. You can adjust tilt, pan, zoom, and movement along the X, Y, and Z axes.",
    "2. The battery ranges from 0 to 1 where 1 and 0 are the maximum and minimum battery levels "
    "respectively. The drone will be unable to move once battery level reaches 0.",
    "3. The values should be in the range: pan: [-90, 90] degrees, tilt: [0, 90] degrees, "
    "zoom: [0.5, 2.0], X:[-1, 1], Y:[-1, 1], Z:[-1, 1].",
)

_COUNT_WORDS = ("no", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")


class AdviceUnparseable(ValueError):
    """The advisor's reply is missing one of pan, tilt, zoom, X, Y, Z or has a non-numeric value."""


@dataclass(frozen=True)
class PromptParts:
    task: str
    env_summary: str
    query: str

    @property
    def text(self) -> str:
        return self.task + self.env_summary + self.query


def _num(value: float):
    """Render integral floats without a fractional part (1.0 -> 1)."""
    return int(value) if float(value).is_integer() else value


def _obstacle_block(obstacles: Sequence[Obstacle]) -> str:
    n = len(obstacles)
    if n == 0:
        return "There are no spherical obstacles in the environment."
    count = _COUNT_WORDS[n] if n < len(_COUNT_WORDS) else str(n)
    head = (f"There is {count} spherical obstacle in the\nenvironment:" if n == 1
            else f"There are {count} spherical obstacles in the\nenvironment:")
    lines = [head]
    for i, ob in enumerate(obstacles, 1):
        # Reference layout: the first entry is compact and carries units, later ones do not.
        if i == 1:
            loc = "[" + ",".join(str(c) for c in ob.center) + "]"
            lines.append(f"{i}. Location: {loc} with radius: {_num(ob.radius)} units")
        else:
            lines.append(f"{i}. Location: {list(ob.center)} with radius: {_num(ob.radius)}")
    return "\n".join(lines)


def prompt_parts(state: UavState, coverage: float, dims: GridDims, obstacles: Sequence[Obstacle]) -> PromptParts:
    cam = state.camera
    summary = {
        "drone_position": list(state.position),
        "camera_params": [FIELD_OF_VIEW, RESOLUTION, float(cam.tilt), float(cam.pan), _num(cam.zoom)],
        "battery": round(float(state.battery), 2),
        "coverage": round(float(coverage), 4),
    }
    grid = f"{dims.x_size}×{dims.y_size}×{dims.z_size}"
    env = ENV_TEXT.format(state=repr(summary), grid=grid) + _obstacle_block(obstacles)
    return PromptParts(
        task=f"{TASK_HEADER}\n{TASK_TEXT}\n\n",
        env_summary=f"{ENV_HEADER}\n{env}\n\n",
        query=QUERY_HEADER + "\n" + "\n".join(QUERY_RULES),
    )


def build_prompt(state: UavState, coverage: float, dims: GridDims, obstacles: Sequence[Obstacle]) -> str:
    """Full advisor prompt: task description, environment summary, request template."""
    return prompt_parts(state, coverage, dims, obstacles).text


@dataclass(frozen=True)
class Advice:
    """Advisor recommendation: a relative move in {-1,0,1}^3 and an absolute camera pose."""

    delta_position: tuple[int, int, int]
    camera_target: CameraConfig

    def target_position(self, position: Sequence[int], dims: GridDims) -> tuple[int, int, int]:
        return dims.clamp([p + d for p, d in zip(position, self.delta_position)])

    def render(self) -> str:
        c = self.camera_target
        dx, dy, dz = self.delta_position
        return f"pan: {c.pan}, tilt: {c.tilt}, zoom: {_num(c.zoom)}, X: {dx}, Y: {dy}, Z: {dz}"

    def to_dict(self) -> dict:
        c = self.camera_target
        return {"delta_position": list(self.delta_position),
                "camera": {"tilt": c.tilt, "pan": c.pan, "zoom": c.zoom}}


_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_KEY_VALUE = re.compile(r"(?<![A-Za-z0-9_])(pan|tilt|zoom|x|y|z)\s*[:=]\s*(" + _NUMBER + ")", re.IGNORECASE)
_KEYS = ("pan", "tilt", "zoom", "x", "y", "z")


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def parse_advice(response: str) -> Advice:
    """Extract ``pan, tilt, zoom, X, Y, Z`` from a reply, clamping and snapping each value.

    Keys are case-insensitive and may appear in any order; the first
    occurrence of each wins.  Raises :class:`AdviceUnparseable` if any key
    is absent or lacks a numeric value.
    """
    if not isinstance(response, str):
        raise AdviceUnparseable(f"expected text, got {type(response).__name__}")
    values: dict[str, float] = {}
    for m in _KEY_VALUE.finditer(response):
        key = m.group(1).lower()
        if key not in values:
            v = float(m.group(2))
            if math.isfinite(v):
                values[key] = v
    missing = [k for k in _KEYS if k not in values]
    if missing:
        raise AdviceUnparseable(f"advisor reply missing numeric {', '.join(missing)}: {response[:200]!r}")
    camera = CameraConfig.snapped(values["tilt"], values["pan"], values["zoom"])
    delta = tuple(min(max(_round_half_up(values[k]), -1), 1) for k in ("x", "y", "z"))
    return Advice(delta, camera)


@dataclass(frozen=True)
class AlignmentParams:
    alpha: float = 0.5
    w_move_align: float = 0.5
    w_cam_align: float = 0.5
    d_max: float = GridDims(15, 15, 3).max_distance
    normalize_camera: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha!r}")
        if self.w_move_align < 0 or self.w_cam_align < 0:
            raise ValueError("alignment weights must be non-negative")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")

    def for_grid(self, dims: GridDims) -> "AlignmentParams":
        return AlignmentParams(self.alpha, self.w_move_align, self.w_cam_align,
                               dims.max_distance, self.normalize_camera)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "w_move_align": self.w_move_align, "w_cam_align": self.w_cam_align,
                "normalize_camera": self.normalize_camera}


def dir_align(delta_p, delta_p_llm) -> float:
    """Cosine similarity of two movement vectors; 0 if either is the zero vector."""
    u = np.asarray(delta_p, dtype=float)
    v = np.asarray(delta_p_llm, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(min(max(np.dot(u, v) / (nu * nv), -1.0), 1.0))


def pos_align(p, p_llm, d_max: float) -> float:
    """1 - ||p - p_llm|| / d_max."""
    diff = np.asarray(p, dtype=float) - np.asarray(p_llm, dtype=float)
    return float(1.0 - np.linalg.norm(diff) / d_max)


def move_reward(alpha: float, dir_term: float, pos_term: float) -> float:
    return alpha * dir_term + (1.0 - alpha) * pos_term


_CAMERA_SPANS = (TILT_MAX - TILT_MIN, PAN_MAX - PAN_MIN, ZOOM_MAX - ZOOM_MIN)


def cam_align_penalty(camera: CameraConfig, camera_llm: CameraConfig, normalize: bool = False) -> float:
    """Negative L1 distance between two camera poses over (tilt, pan, zoom).

    Native units by default; ``normalize`` divides each term by its range width.
    """
    diffs = (abs(camera.tilt - camera_llm.tilt), abs(camera.pan - camera_llm.pan),
             abs(camera.zoom - camera_llm.zoom))
    if normalize:
        diffs = tuple(d / s for d, s in zip(diffs, _CAMERA_SPANS))
    return -math.fsum(diffs)


def llm_shaping(params: AlignmentParams, state_next: UavState, state_prev: UavState,
                advice: Optional[Advice], dims: GridDims) -> float:
    """Alignment reward of the transition ``state_prev -> state_next`` against ``advice``.

    Returns 0 when there is no usable advice for the step.
    """
    if advice is None:
        return 0.0
    p0, p1 = state_prev.position, state_next.position
    target = advice.target_position(p0, dims)
    moved = [b - a for a, b in zip(p0, p1)]
    advised = [b - a for a, b in zip(p0, target)]
    f_move = move_reward(params.alpha, dir_align(moved, advised), pos_align(p1, target, params.d_max))
    f_cam = cam_align_penalty(state_next.camera, advice.camera_target, params.normalize_camera)
    return params.w_cam_align * f_cam + params.w_move_align * f_move
