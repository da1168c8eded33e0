"""Advisor backends that turn a prompt into an :class:`~pirl.pare.Advice`.

``ScriptedAdvisor`` is a deterministic greedy planner for offline,
reproducible runs.  ``HttpAdvisor`` talks to any chat-completions style
endpoint.  ``CachedAdvisor`` throttles queries and records every raw reply
so ``ReplayAdvisor`` can reproduce a run without network access.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import httpx
import numpy as np

from .env import CameraConfig, CoverageMap, GridDims, Obstacle, UavState, STEEP_TILT, ZOOM_MAX, ZOOM_MIN
from .pare import Advice, parse_advice

log = logging.getLogger(__name__)

API_KEY_ENV = "PIRL_API_KEY"


class AdvisorError(RuntimeError):
    pass


class AdvisorTimeout(AdvisorError):
    pass


class AdvisorHttpError(AdvisorError):
    def __init__(self, status: int, body: str):
        super().__init__(f"advisor returned HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class ReplayExhausted(AdvisorError):
    pass


@dataclass
class AdvisorContext:
    """What a backend may look at besides the prompt text."""

    state: UavState
    coverage: CoverageMap
    obstacles: Sequence[Obstacle]
    dims: GridDims


@dataclass
class AdvisorReply:
    advice: Advice
    raw: str
    latency: float = 0.0
    queried: bool = True


class AdvisorBackend(Protocol):
    name: str

    def complete(self, prompt: str, ctx: AdvisorContext) -> str:
        ...


def state_key(state: UavState, coverage_fraction: float) -> str:
    """Stable hash of position, camera, battery (0.05 buckets) and coverage (0.01 buckets)."""
    c = state.camera
    text = (f"{list(state.position)}|{c.tilt},{c.pan},{c.zoom:.1f}|"
            f"{math.floor(state.battery * 20 + 1e-9)}|{math.floor(coverage_fraction * 100 + 1e-9)}")
    return hashlib.sha1(text.encode()).hexdigest()[:16]


def advise(backend: AdvisorBackend, prompt: str, ctx: AdvisorContext) -> AdvisorReply:
    """Query ``backend`` and parse its reply.

    Raises AdvisorTimeout, AdvisorHttpError or AdviceUnparseable; callers
    treat all of them as "no shaping this step".
    """
    t0 = time.perf_counter()
    raw = backend.complete(prompt, ctx)
    latency = time.perf_counter() - t0
    return AdvisorReply(parse_advice(raw), raw, latency)


# --- scripted oracle -------------------------------------------------------

_DELTAS = np.array(list(itertools.product((-1, 0, 1), repeat=3)))  # lexicographic order
_ZOOMS = [round(ZOOM_MIN + 0.1 * k, 1) for k in range(int(round((ZOOM_MAX - ZOOM_MIN) / 0.1)) + 1)]


def _box_counts(sums: np.ndarray, xs: np.ndarray, ys: np.ndarray, r: int) -> np.ndarray:
    """Number of flagged cells in the (2r+1)^2 box around each (x, y), clipped to the grid."""
    nx, ny = sums.shape[0] - 1, sums.shape[1] - 1
    x0, x1 = np.maximum(xs - r, 0), np.minimum(xs + r + 1, nx)
    y0, y1 = np.maximum(ys - r, 0), np.minimum(ys + r + 1, ny)
    return sums[x1, y1] - sums[x0, y1] - sums[x1, y0] + sums[x0, y0]


def _quadrant_pan(uncovered: np.ndarray, x: int, y: int) -> int:
    """Pan toward the quadrant (around the UAV) with the most uncovered cells."""
    q = {
        (1, 1): uncovered[x:, y:].sum(), (1, -1): uncovered[x:, :y].sum(),
        (-1, 1): uncovered[:x, y:].sum(), (-1, -1): uncovered[:x, :y].sum(),
    }
    sx, sy = max(q, key=lambda k: (q[k], k))
    return sy * (45 if sx > 0 else 90)


def scripted_oracle(state: UavState, coverage: CoverageMap, obstacles: Sequence[Obstacle],
                    dims: GridDims) -> Advice:
    """Greedy one-step lookahead over the 27 moves in {-1,0,1}^3.

    Each collision-free candidate is scored by the most new ground cells any
    zoom level would reveal from there (at the current tilt, or 75 degrees if
    the current tilt is too steep), then by closeness to the nearest
    uncovered cell.  The smallest zoom reaching that best count is
    recommended, and pan points at the quadrant around the chosen cell with
    the most uncovered ground.  Ties keep the lexicographically first move.  On a fully
    covered map every move ties, the first free move wins and the camera is
    left as is.
    """
    p = np.asarray(state.position)
    targets = np.clip(p + _DELTAS, 0, np.asarray(dims.shape) - 1)
    free = np.ones(len(targets), dtype=bool)
    for ob in obstacles:
        d2 = ((targets - np.asarray(ob.center)) ** 2).sum(1)
        free &= d2 > ob.radius ** 2
    if not free.any():
        return Advice((0, 0, 0), state.camera)
    deltas, targets = _DELTAS[free], targets[free]

    uncovered = ~coverage.covered
    if not uncovered.any():
        return Advice(tuple(int(c) for c in deltas[0]), state.camera)

    tilt = state.camera.tilt if state.camera.tilt < STEEP_TILT else STEEP_TILT - 5
    sums = np.zeros((dims.x_size + 1, dims.y_size + 1), dtype=np.int64)
    sums[1:, 1:] = uncovered.cumsum(0).cumsum(1)
    xs, ys = targets[:, 0], targets[:, 1]

    # counts[k, i]: new cells seen from candidate i at zoom _ZOOMS[k]
    by_reach = {}
    counts = np.empty((len(_ZOOMS), len(targets)), dtype=np.int64)
    for k, z in enumerate(_ZOOMS):
        r = CameraConfig(tilt, 0, z).reach
        if r not in by_reach:
            by_reach[r] = _box_counts(sums, xs, ys, r)
        counts[k] = by_reach[r]
    top = counts.max(0)
    ux, uy = np.nonzero(uncovered)
    gap = ((xs[:, None] - ux[None, :]) ** 2 + (ys[:, None] - uy[None, :]) ** 2).min(1)

    # lexsort sorts ascending by the last key first; stable, so earlier moves win ties
    best = int(np.lexsort((gap, -top))[0])
    zoom = _ZOOMS[int(np.argmax(counts[:, best] == top[best]))]
    tx, ty = int(xs[best]), int(ys[best])
    pan = _quadrant_pan(uncovered, tx, ty)
    return Advice(tuple(int(c) for c in deltas[best]), CameraConfig(tilt, pan, zoom))


class ScriptedAdvisor:
    """Deterministic stand-in for the language model; ignores the prompt text."""

    name = "scripted"

    def complete(self, prompt: str, ctx: AdvisorContext) -> str:
        return scripted_oracle(ctx.state, ctx.coverage, ctx.obstacles, ctx.dims).render()


# --- HTTP ------------------------------------------------------------------

class HttpAdvisor:
    """Chat-completions client: POSTs the prompt as a single user message."""

    name = "http"

    def __init__(self, url: str, model: str = "gpt-3.5-turbo", temperature: float = 0.0,
                 timeout: float = 30.0, api_key: Optional[str] = None,
                 client: Optional[httpx.Client] = None):
        if not timeout > 0:
            raise ValueError("timeout must be positive")
        self.url = url
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, prompt: str, ctx: Optional[AdvisorContext] = None) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(self.url, json=body, headers=headers, timeout=self.timeout)
        except httpx.TimeoutException as e:
            raise AdvisorTimeout(f"advisor request timed out after {self.timeout}s") from e
        except httpx.HTTPError as e:
            raise AdvisorError(f"advisor request failed: {e}") from e
        if resp.status_code >= 400:
            raise AdvisorHttpError(resp.status_code, resp.text)
        try:
            choice = resp.json()["choices"][0]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise AdvisorHttpError(resp.status_code, resp.text) from e
        message = choice.get("message") or {}
        return message.get("content") or choice.get("text") or ""

    def close(self):
        self._client.close()


# --- caching and replay ----------------------------------------------------

class _SingleFlight:
    """Collapse concurrent calls for the same key into one execution."""

    def __init__(self):
        self._lock = threading.Lock()
        self._calls: dict[str, Future] = {}

    def do(self, key: str, fn):
        with self._lock:
            fut = self._calls.get(key)
            leader = fut is None
            if leader:
                fut = self._calls[key] = Future()
        if not leader:
            return fut.result()
        try:
            fut.set_result(fn())
        except BaseException as e:
            fut.set_exception(e)
        finally:
            with self._lock:
                del self._calls[key]
        return fut.result()


class CachedAdvisor:
    """Query ``inner`` every ``interval``-th step or when the state key changes.

    Between refreshes the last advice is replayed.  Every refreshed reply is
    appended to ``record_path`` (JSONL) when one is given.
    """

    def __init__(self, inner: AdvisorBackend, interval: int = 1, record_path: Optional[Path] = None):
        if interval < 1:
            raise ValueError("interval must be >= 1")
        self.inner = inner
        self.name = inner.name
        self.interval = interval
        self.record_path = Path(record_path) if record_path else None
        self.calls = 0
        self._step = 0
        self._last: Optional[tuple[str, AdvisorReply]] = None
        self._flight = _SingleFlight()
        self._write_lock = threading.Lock()

    def reset(self):
        """Forget the replayed advice; the next call refreshes."""
        self._step = 0
        self._last = None

    def advise(self, prompt: str, ctx: AdvisorContext) -> AdvisorReply:
        key = state_key(ctx.state, ctx.coverage.fraction)
        step = self._step
        self._step += 1
        if self._last is not None and step % self.interval and self._last[0] == key:
            reply = self._last[1]
            return AdvisorReply(reply.advice, reply.raw, 0.0, queried=False)
        try:
            reply = self._flight.do(key, lambda: self._refresh(key, prompt, ctx))
        except Exception:
            self._last = None
            raise
        self._last = (key, reply)
        return reply

    def _refresh(self, key: str, prompt: str, ctx: AdvisorContext) -> AdvisorReply:
        self.calls += 1
        t0 = time.perf_counter()
        raw = self.inner.complete(prompt, ctx)
        latency = time.perf_counter() - t0
        self._record(key, raw, latency)
        return AdvisorReply(parse_advice(raw), raw, latency)

    def _record(self, key: str, raw: str, latency: float):
        if self.record_path is None:
            return
        try:
            advice = parse_advice(raw).to_dict()
        except ValueError:
            advice = None
        line = json.dumps({"state_key": key, "raw_response": raw, "advice": advice,
                           "latency": round(latency, 6)})
        with self._write_lock, open(self.record_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


class ReplayAdvisor:
    """Serve raw replies recorded by :class:`CachedAdvisor`, in order, without any network."""

    name = "replay"

    def __init__(self, path: Path, strict: bool = True):
        self.path = Path(path)
        self.records = [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines()
                        if line.strip()]
        self.strict = strict
        self._pos = 0

    def complete(self, prompt: str, ctx: AdvisorContext) -> str:
        if self._pos >= len(self.records):
            raise ReplayExhausted(f"replay file {self.path} has only {len(self.records)} records")
        rec = self.records[self._pos]
        self._pos += 1
        if self.strict:
            key = state_key(ctx.state, ctx.coverage.fraction)
            if rec["state_key"] != key:
                raise ReplayExhausted(f"replay diverged at record {self._pos - 1}: "
                                      f"expected state {rec['state_key']}, got {key}")
        return rec["raw_response"]


def make_advisor(spec: dict) -> CachedAdvisor:
    """Build a cached advisor from a config mapping (``kind``: scripted | http | replay)."""
    kind = spec.get("kind", "scripted")
    if kind == "scripted":
        inner = ScriptedAdvisor()
    elif kind == "http":
        if not spec.get("url"):
            raise ValueError("http advisor needs a 'url'")
        inner = HttpAdvisor(spec["url"], model=spec.get("model", "gpt-3.5-turbo"),
                            temperature=float(spec.get("temperature", 0.0)),
                            timeout=float(spec.get("timeout", 30.0)))
    elif kind == "replay":
        if not spec.get("path"):
            raise ValueError("replay advisor needs a 'path'")
        inner = ReplayAdvisor(Path(spec["path"]))
    else:
        raise ValueError(f"unknown advisor kind {kind!r}")
    return CachedAdvisor(inner, int(spec.get("interval", 1)), spec.get("record_path"))
