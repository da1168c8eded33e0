"""Discrete 3D grid world for UAV visual coverage with a pan-tilt-zoom camera.

The UAV moves one cell at a time, adjusts its camera in fixed increments and
observes a square footprint of ground cells (z = 0) centred beneath it.  The
footprint half-width depends on tilt and zoom only.  Spherical obstacles
block movement, wind occasionally pushes the UAV sideways, and every action
drains the normalised battery.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

TILT_MIN, TILT_MAX, TILT_STEP = 0, 90, 5
PAN_MIN, PAN_MAX, PAN_STEP = -90, 90, 15
ZOOM_MIN, ZOOM_MAX, ZOOM_STEP = 0.5, 2.0, 0.1

# Tilt at or above this angle narrows the footprint to 1 x zoom.
STEEP_TILT = 80

# Episode length of the 15x15x3 training grid; battery drains are set so that
# the normalised battery spans one episode of this length.
BASE_EPISODE_STEPS = 225


class EnvError(RuntimeError):
    pass


class BatteryExhausted(EnvError):
    pass


class EpisodeOver(EnvError):
    pass


class ConfigInvalid(ValueError):
    pass


class Action(IntEnum):
    """The 12 atomic actions, movement first, then camera."""

    X_POS = 0
    X_NEG = 1
    Y_POS = 2
    Y_NEG = 3
    Z_POS = 4
    Z_NEG = 5
    TILT_POS = 6
    TILT_NEG = 7
    PAN_POS = 8
    PAN_NEG = 9
    ZOOM_POS = 10
    ZOOM_NEG = 11

    @property
    def label(self) -> str:
        return ACTION_LABELS[self]

    @property
    def is_move(self) -> bool:
        return self < Action.TILT_POS

    @classmethod
    def from_label(cls, label: str) -> "Action":
        try:
            return cls(ACTION_LABELS.index(label))
        except ValueError:
            raise ValueError(f"unknown action label {label!r}") from None


ACTION_LABELS = ("x+", "x-", "y+", "y-", "z+", "z-",
                 "tilt+", "tilt-", "pan+", "pan-", "zoom+", "zoom-")
N_ACTIONS = len(Action)

MOVE_DELTAS = {
    Action.X_POS: (1, 0, 0), Action.X_NEG: (-1, 0, 0),
    Action.Y_POS: (0, 1, 0), Action.Y_NEG: (0, -1, 0),
    Action.Z_POS: (0, 0, 1), Action.Z_NEG: (0, 0, -1),
}


@dataclass(frozen=True)
class GridDims:
    x_size: int
    y_size: int
    z_size: int

    def __post_init__(self):
        for name in ("x_size", "y_size", "z_size"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigInvalid(f"{name} must be a positive integer, got {value!r}")

    @classmethod
    def parse(cls, text: str) -> "GridDims":
        """Parse ``"15x15x3"`` (``x`` or ``×`` separators)."""
        parts = text.lower().replace("×", "x").split("x")
        if len(parts) != 3:
            raise ConfigInvalid(f"grid must look like XxYxZ, got {text!r}")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError:
            raise ConfigInvalid(f"grid must look like XxYxZ, got {text!r}") from None

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.x_size, self.y_size, self.z_size)

    @property
    def ground_cells(self) -> int:
        return self.x_size * self.y_size

    @property
    def volume(self) -> int:
        return self.x_size * self.y_size * self.z_size

    @property
    def max_distance(self) -> float:
        return math.sqrt((self.x_size - 1) ** 2 + (self.y_size - 1) ** 2 + (self.z_size - 1) ** 2)

    def contains(self, p: Sequence[int]) -> bool:
        return all(0 <= c < n for c, n in zip(p, self.shape))

    def clamp(self, p: Sequence[int]) -> tuple[int, int, int]:
        return tuple(min(max(int(c), 0), n - 1) for c, n in zip(p, self.shape))

    def __str__(self) -> str:
        return f"{self.x_size}x{self.y_size}x{self.z_size}"


def _snap_zoom(zoom: float) -> float:
    return round(round(zoom / ZOOM_STEP) * ZOOM_STEP, 1)


@dataclass(frozen=True)
class CameraConfig:
    """Camera pose: tilt and pan in whole degrees, zoom as a magnification."""

    tilt: int = 45
    pan: int = 0
    zoom: float = 1.0

    def validate(self) -> "CameraConfig":
        if int(self.tilt) != self.tilt or not TILT_MIN <= self.tilt <= TILT_MAX or self.tilt % TILT_STEP:
            raise ConfigInvalid(f"tilt must be a multiple of {TILT_STEP} in [0, 90], got {self.tilt!r}")
        if int(self.pan) != self.pan or not PAN_MIN <= self.pan <= PAN_MAX or self.pan % PAN_STEP:
            raise ConfigInvalid(f"pan must be a multiple of {PAN_STEP} in [-90, 90], got {self.pan!r}")
        if not ZOOM_MIN - 1e-9 <= self.zoom <= ZOOM_MAX + 1e-9 or abs(_snap_zoom(self.zoom) - self.zoom) > 1e-9:
            raise ConfigInvalid(f"zoom must be a multiple of 0.1 in [0.5, 2.0], got {self.zoom!r}")
        return self

    @classmethod
    def snapped(cls, tilt: float, pan: float, zoom: float) -> "CameraConfig":
        """Clamp each parameter to its range and round it onto its grid."""
        tilt = min(max(tilt, TILT_MIN), TILT_MAX)
        pan = min(max(pan, PAN_MIN), PAN_MAX)
        zoom = min(max(zoom, ZOOM_MIN), ZOOM_MAX)
        return cls(
            tilt=int(math.floor(tilt / TILT_STEP + 0.5)) * TILT_STEP,
            pan=int(math.floor(pan / PAN_STEP + 0.5)) * PAN_STEP,
            zoom=_snap_zoom(zoom),
        )

    def as_tuple(self) -> tuple[int, int, float]:
        return (self.tilt, self.pan, self.zoom)

    @property
    def half_width(self) -> float:
        return (2.0 if self.tilt < STEEP_TILT else 1.0) * self.zoom

    @property
    def reach(self) -> int:
        """Integer half-width of the footprint in cells."""
        return int(math.floor(self.half_width + 1e-9))


@dataclass(frozen=True)
class UavState:
    position: tuple[int, int, int]
    camera: CameraConfig = field(default_factory=CameraConfig)
    battery: float = 1.0

    def to_dict(self) -> dict:
        return {"position": list(self.position), "camera": asdict(self.camera), "battery": self.battery}

    @classmethod
    def from_dict(cls, data: dict) -> "UavState":
        cam = data.get("camera", {})
        camera = CameraConfig(tilt=cam.get("tilt", 45), pan=cam.get("pan", 0), zoom=float(cam.get("zoom", 1.0)))
        return cls(tuple(int(c) for c in data["position"]), camera.validate(), float(data.get("battery", 1.0)))


@dataclass(frozen=True)
class Obstacle:
    center: tuple[int, int, int]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigInvalid(f"obstacle radius must be positive, got {self.radius!r}")

    def contains(self, p: Sequence[int]) -> bool:
        return sum((a - b) ** 2 for a, b in zip(p, self.center)) <= self.radius ** 2

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius": self.radius}

    @classmethod
    def from_dict(cls, data: dict) -> "Obstacle":
        return cls(tuple(int(c) for c in data["center"]), float(data["radius"]))


def footprint_bounds(position: Sequence[int], camera: CameraConfig, dims: GridDims) -> tuple[int, int, int, int]:
    """Half-open ground slice ``(x0, x1, y0, y1)`` seen from ``position``."""
    r = camera.reach
    x, y = position[0], position[1]
    return (max(x - r, 0), min(x + r + 1, dims.x_size),
            max(y - r, 0), min(y + r + 1, dims.y_size))


def view_cone(position: Sequence[int], camera: CameraConfig, dims: GridDims) -> frozenset[tuple[int, int, int]]:
    """Ground cells ``(i, j, 0)`` inside the camera footprint, clipped to the grid."""
    x0, x1, y0, y1 = footprint_bounds(position, camera, dims)
    return frozenset((i, j, 0) for i in range(x0, x1) for j in range(y0, y1))


class CoverageMap:
    """Per-ground-cell coverage flags and observation counts for one episode."""

    def __init__(self, dims: GridDims):
        self.dims = dims
        self.covered = np.zeros((dims.x_size, dims.y_size), dtype=bool)
        self.visit_count = np.zeros((dims.x_size, dims.y_size), dtype=np.int64)
        self.covered_count = 0
        # observations of cells that were already covered at observation time
        self.redundant_view_count = 0

    @property
    def total(self) -> int:
        return self.dims.ground_cells

    @property
    def fraction(self) -> float:
        return self.covered_count / self.total

    @property
    def complete(self) -> bool:
        return self.covered_count == self.total

    def observe(self, bounds: tuple[int, int, int, int]) -> int:
        """Mark a footprint slice as seen and return the number of newly covered cells."""
        x0, x1, y0, y1 = bounds
        window = self.covered[x0:x1, y0:y1]
        seen_before = int(window.sum())
        newly = window.size - seen_before
        self.redundant_view_count += seen_before
        window[...] = True
        self.visit_count[x0:x1, y0:y1] += 1
        self.covered_count += newly
        return newly

    def copy(self) -> "CoverageMap":
        other = CoverageMap(self.dims)
        other.covered = self.covered.copy()
        other.visit_count = self.visit_count.copy()
        other.covered_count = self.covered_count
        other.redundant_view_count = self.redundant_view_count
        return other


@dataclass
class StepEvents:
    observed: tuple[tuple[int, int], ...]
    newly_covered: int
    redundant: bool
    collision: bool
    idle: bool
    battery_drain: float
    wind: tuple[int, int] = (0, 0)
    # visit counts of the observed cells just before this step, row-major
    prior_visits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    def to_dict(self) -> dict:
        return {
            "observed": [list(c) for c in self.observed],
            "newly_covered": self.newly_covered,
            "redundant": self.redundant,
            "collision": self.collision,
            "idle": self.idle,
            "battery_drain": self.battery_drain,
            "wind": list(self.wind),
        }


@dataclass
class EnvConfig:
    """Environment parameters; ``obstacles=None`` means random layouts per episode."""

    dims: GridDims = field(default_factory=lambda: GridDims(15, 15, 3))
    obstacles: Optional[list[Obstacle]] = None
    obstacle_count: tuple[int, int] = (2, 5)
    obstacle_radii: tuple[float, ...] = (1.0, 1.5, 2.0)
    wind_probability: float = 0.1
    wind_magnitude: int = 1
    max_steps: int = BASE_EPISODE_STEPS
    drain_move: float = 1.0 / (2 * BASE_EPISODE_STEPS)
    drain_cam: float = 1.0 / (4 * BASE_EPISODE_STEPS)
    start_camera: CameraConfig = field(default_factory=CameraConfig)
    stop_on_full_coverage: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "EnvConfig":
        if not 0.0 <= self.wind_probability <= 1.0:
            raise ConfigInvalid(f"wind_probability must be in [0, 1], got {self.wind_probability!r}")
        if self.wind_magnitude < 1:
            raise ConfigInvalid(f"wind_magnitude must be positive, got {self.wind_magnitude!r}")
        if self.max_steps < 1:
            raise ConfigInvalid(f"max_steps must be >= 1, got {self.max_steps!r}")
        if self.drain_move < 0 or self.drain_cam < 0:
            raise ConfigInvalid("battery drains must be non-negative")
        lo, hi = self.obstacle_count
        if not 0 <= lo <= hi:
            raise ConfigInvalid(f"obstacle_count must be an ordered pair, got {self.obstacle_count!r}")
        for ob in self.obstacles or ():
            if not self.dims.contains(ob.center):
                raise ConfigInvalid(f"obstacle center {ob.center} outside grid {self.dims}")
        self.start_camera.validate()
        return self

    def scaled_to(self, dims: GridDims, train_dims: Optional[GridDims] = None) -> "EnvConfig":
        """Same environment on a test grid, with step and battery budgets scaled by volume ratio."""
        alpha = dims.volume / (train_dims or self.dims).volume
        return replace(
            self,
            dims=dims,
            obstacles=None if self.obstacles is None else [o for o in self.obstacles if dims.contains(o.center)],
            max_steps=max(1, int(round(alpha * self.max_steps))),
            drain_move=self.drain_move / alpha,
            drain_cam=self.drain_cam / alpha,
        )

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims.shape),
            "obstacles": None if self.obstacles is None else [o.to_dict() for o in self.obstacles],
            "obstacle_count": list(self.obstacle_count),
            "obstacle_radii": list(self.obstacle_radii),
            "wind_probability": self.wind_probability,
            "wind_magnitude": self.wind_magnitude,
            "max_steps": self.max_steps,
            "drain_move": self.drain_move,
            "drain_cam": self.drain_cam,
            "start_camera": asdict(self.start_camera),
            "stop_on_full_coverage": self.stop_on_full_coverage,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        data = dict(data)
        kwargs = {}
        if "dims" in data:
            dims = data.pop("dims")
            kwargs["dims"] = GridDims.parse(dims) if isinstance(dims, str) else GridDims(*dims)
        if data.get("obstacles") is not None:
            kwargs["obstacles"] = [Obstacle.from_dict(o) for o in data.pop("obstacles")]
        else:
            data.pop("obstacles", None)
        if "start_camera" in data:
            kwargs["start_camera"] = CameraConfig(**data.pop("start_camera"))
        for key in ("obstacle_count", "obstacle_radii"):
            if key in data:
                kwargs[key] = tuple(data.pop(key))
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigInvalid(f"unknown environment config keys: {sorted(unknown)}")
        kwargs.update(data)
        return cls(**kwargs)


def _inside_any(p: Sequence[int], obstacles: Iterable[Obstacle]) -> bool:
    return any(ob.contains(p) for ob in obstacles)


def apply_camera_action(camera: CameraConfig, action: Action) -> CameraConfig:
    tilt, pan, zoom = camera.as_tuple()
    if action == Action.TILT_POS:
        tilt = min(tilt + TILT_STEP, TILT_MAX)
    elif action == Action.TILT_NEG:
        tilt = max(tilt - TILT_STEP, TILT_MIN)
    elif action == Action.PAN_POS:
        pan = min(pan + PAN_STEP, PAN_MAX)
    elif action == Action.PAN_NEG:
        pan = max(pan - PAN_STEP, PAN_MIN)
    elif action == Action.ZOOM_POS:
        zoom = min(_snap_zoom(zoom + ZOOM_STEP), ZOOM_MAX)
    elif action == Action.ZOOM_NEG:
        zoom = max(_snap_zoom(zoom - ZOOM_STEP), ZOOM_MIN)
    return CameraConfig(tilt, pan, zoom)


# the eight non-zero (dx, dy) wind directions
_WIND_DIRECTIONS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]


class CoverageEnv:
    """Single UAV episode driver.

    ``reset`` builds a layout from a seed; ``step`` applies one atomic action
    (or ``None`` for a hover step that changes nothing but still observes and
    drains the camera-level battery cost).
    """

    def __init__(self, config: EnvConfig):
        self.config = config.validate()
        self.dims = config.dims
        self.obstacles: list[Obstacle] = []
        self.state: Optional[UavState] = None
        self.coverage = CoverageMap(self.dims)
        self.steps = 0
        self.seed: Optional[int] = None
        self._wind_rng = np.random.default_rng(config.seed)

    @property
    def done(self) -> bool:
        if self.state is None:
            return True
        return (self.steps >= self.config.max_steps
                or self.state.battery <= 0.0
                or (self.config.stop_on_full_coverage and self.coverage.complete))

    def reset(self, seed: Optional[int] = None) -> UavState:
        cfg = self.config
        self.seed = cfg.seed if seed is None else int(seed)
        layout_seq, wind_seq = np.random.SeedSequence(self.seed).spawn(2)
        rng = np.random.default_rng(layout_seq)
        self._wind_rng = np.random.default_rng(wind_seq)

        if cfg.obstacles is not None:
            self.obstacles = list(cfg.obstacles)
            start = self._pick_start(rng)
            if start is None:
                raise ConfigInvalid("explicit obstacles leave no free start cell")
        else:
            for _ in range(100):
                self.obstacles = self._random_obstacles(rng)
                start = self._pick_start(rng)
                if start is not None:
                    break
            else:
                raise ConfigInvalid("could not place obstacles with a free start cell")

        self.state = UavState(start, cfg.start_camera, 1.0)
        self.coverage = CoverageMap(self.dims)
        self.steps = 0
        return self.state

    def _random_obstacles(self, rng: np.random.Generator) -> list[Obstacle]:
        lo, hi = self.config.obstacle_count
        n = int(rng.integers(lo, hi + 1))
        obstacles = []
        for _ in range(n):
            center = tuple(int(rng.integers(0, s)) for s in self.dims.shape)
            radius = float(self.config.obstacle_radii[int(rng.integers(len(self.config.obstacle_radii)))])
            obstacles.append(Obstacle(center, radius))
        return obstacles

    def _pick_start(self, rng: np.random.Generator) -> Optional[tuple[int, int, int]]:
        free = [p for p in np.ndindex(*self.dims.shape) if not _inside_any(p, self.obstacles)]
        if not free:
            return None
        return tuple(int(c) for c in free[int(rng.integers(len(free)))])

    def step(self, action: Optional[Action]) -> tuple[UavState, StepEvents]:
        if self.state is None:
            raise EpisodeOver("reset() must be called before step()")
        if self.state.battery <= 0.0:
            raise BatteryExhausted("battery exhausted")
        if self.done:
            raise EpisodeOver(f"episode over after {self.steps} steps")

        cfg = self.config
        prev = self.state
        position, camera = prev.position, prev.camera
        collision = False
        wind = (0, 0)

        if action is not None and Action(action).is_move:
            action = Action(action)
            d = MOVE_DELTAS[action]
            candidate = [position[0] + d[0], position[1] + d[1], position[2] + d[2]]
            if cfg.wind_probability > 0 and self._wind_rng.random() < cfg.wind_probability:
                dx, dy = _WIND_DIRECTIONS[int(self._wind_rng.integers(len(_WIND_DIRECTIONS)))]
                wind = (dx * cfg.wind_magnitude, dy * cfg.wind_magnitude)
                candidate[0] += wind[0]
                candidate[1] += wind[1]
            candidate = self.dims.clamp(candidate)
            if _inside_any(candidate, self.obstacles):
                collision = True
            else:
                position = candidate
            drain = cfg.drain_move
        else:
            if action is not None:
                camera = apply_camera_action(camera, Action(action))
            drain = cfg.drain_cam

        battery = max(prev.battery - drain, 0.0)
        self.state = UavState(position, camera, battery)
        self.steps += 1

        bounds = footprint_bounds(position, camera, self.dims)
        x0, x1, y0, y1 = bounds
        prior = self.coverage.visit_count[x0:x1, y0:y1].ravel().copy()
        newly = self.coverage.observe(bounds)
        observed = tuple((i, j) for i in range(x0, x1) for j in range(y0, y1))
        events = StepEvents(
            observed=observed,
            newly_covered=newly,
            redundant=bool(observed) and newly == 0,
            collision=collision,
            idle=position == prev.position and camera == prev.camera,
            battery_drain=prev.battery - battery,
            wind=wind,
            prior_visits=prior,
        )
        return self.state, events
