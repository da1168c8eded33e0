import json
import math
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from pirl.advisor import (AdvisorContext, AdvisorHttpError, AdvisorTimeout, CachedAdvisor, HttpAdvisor,
                          ReplayAdvisor, ReplayExhausted, ScriptedAdvisor, _SingleFlight, make_advisor,
                          scripted_oracle, state_key)
from pirl.env import CameraConfig, CoverageEnv, CoverageMap, EnvConfig, GridDims, Obstacle, UavState
from pirl.pare import AdviceUnparseable, build_prompt

GRID = GridDims(15, 15, 3)
SAMPLE_RESPONSE = "pan: 75, tilt: 45, zoom: 1, X: -1, Y: 0, Z: 0"


def ctx(state, coverage=None, obstacles=()):
    return AdvisorContext(state, coverage or CoverageMap(GRID), list(obstacles), GRID)


# --- scripted oracle ---------------------------------------------------------------

def test_oracle_full_map_picks_first_free_move_and_keeps_camera():
    cov = CoverageMap(GRID)
    cov.covered[:] = True
    state = UavState((7, 7, 1), CameraConfig(30, 15, 1.3), 0.5)
    adv = scripted_oracle(state, cov, [], GRID)
    assert adv.delta_position == (-1, -1, -1)
    assert adv.camera_target == state.camera


def test_oracle_full_map_skips_blocked_first_move():
    cov = CoverageMap(GRID)
    cov.covered[:] = True
    state = UavState((7, 7, 1), CameraConfig(), 0.5)
    adv = scripted_oracle(state, cov, [Obstacle((6, 6, 0), 0.5)], GRID)
    assert adv.delta_position == (-1, -1, 0)


def test_oracle_corner_moves_inward_at_full_zoom():
    state = UavState((0, 0, 2), CameraConfig(45, 0, 1.0), 1.0)
    adv = scripted_oracle(state, CoverageMap(GRID), [], GRID)
    assert adv.delta_position[0] >= 0 and adv.delta_position[1] >= 0
    assert adv.delta_position[:2] != (0, 0)
    assert adv.camera_target.zoom == 2.0
    assert adv.camera_target.tilt < 80


def test_oracle_steep_tilt_recommends_shallow():
    state = UavState((7, 7, 1), CameraConfig(85, 0, 1.0), 1.0)
    assert scripted_oracle(state, CoverageMap(GRID), [], GRID).camera_target.tilt < 80


def test_oracle_avoids_obstacle_in_positive_x():
    obstacle = Obstacle((8, 7, 1), 1.0)
    state = UavState((7, 7, 1), CameraConfig(), 1.0)
    cov = CoverageMap(GRID)
    cov.covered[:7, :] = True  # all the uncovered ground lies in +x
    adv = scripted_oracle(state, cov, [obstacle], GRID)
    target = adv.target_position(state.position, GRID)
    assert not obstacle.contains(target)
    assert adv.delta_position != (1, 0, 0)


def test_oracle_small_frontier_uses_smaller_zoom():
    cov = CoverageMap(GRID)
    cov.covered[:] = True
    cov.covered[7, 8] = False
    state = UavState((7, 7, 1), CameraConfig(45, 0, 1.0), 1.0)
    adv = scripted_oracle(state, cov, [], GRID)
    assert adv.camera_target.zoom == 0.5


def test_oracle_is_deterministic():
    env = CoverageEnv(EnvConfig())
    env.reset(3)
    a = scripted_oracle(env.state, env.coverage, env.obstacles, GRID)
    b = scripted_oracle(env.state, env.coverage.copy(), list(env.obstacles), GRID)
    assert a == b
    backend = ScriptedAdvisor()
    c = ctx(env.state, env.coverage, env.obstacles)
    assert backend.complete("", c) == backend.complete("anything", c)


# --- HTTP backend -------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        self.server.requests.append((self.path, dict(self.headers), body))
        mode = self.server.mode
        if mode == "slow":
            time.sleep(0.5)
        if mode == "5xx":
            payload, status = b"upstream overloaded", 503
        else:
            payload = json.dumps({"choices": [{"message": {"role": "assistant",
                                                           "content": SAMPLE_RESPONSE}}]}).encode()
            status = 200
        try:
            self.send_response(status)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
        except (BrokenPipeError, ConnectionResetError):
            pass  # client already gave up (timeout test)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    srv.requests, srv.mode = [], "ok"
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def url(srv):
    return f"http://127.0.0.1:{srv.server_address[1]}/v1/chat/completions"


def test_http_success_parses_sample(server, monkeypatch):
    monkeypatch.setenv("PIRL_API_KEY", "secret")
    backend = HttpAdvisor(url(server), model="m1", timeout=5)
    state = UavState((14, 0, 2), CameraConfig(60, 90, 1.0), 0.24)
    prompt = build_prompt(state, 0.5, GRID, [])
    reply = CachedAdvisor(backend).advise(prompt, ctx(state))
    assert reply.advice.delta_position == (-1, 0, 0)
    assert reply.advice.camera_target == CameraConfig(45, 75, 1.0)
    path, headers, body = server.requests[0]
    assert body["model"] == "m1" and body["temperature"] == 0
    assert body["messages"] == [{"role": "user", "content": prompt}]
    assert headers["Authorization"] == "Bearer secret"


def test_http_5xx_raises_with_status_and_body(server):
    server.mode = "5xx"
    with pytest.raises(AdvisorHttpError) as info:
        HttpAdvisor(url(server), timeout=5).complete("hello")
    assert info.value.status == 503 and "overloaded" in info.value.body


def test_http_timeout(server):
    server.mode = "slow"
    with pytest.raises(AdvisorTimeout):
        HttpAdvisor(url(server), timeout=0.1).complete("hello")


def test_http_rejects_bad_arguments():
    with pytest.raises(ValueError):
        HttpAdvisor("http://localhost", timeout=0)
    with pytest.raises(ValueError):
        HttpAdvisor("http://localhost").complete("")


# --- cache and replay ----------------------------------------------------------------

class CountingBackend:
    name = "counting"

    def __init__(self, reply=SAMPLE_RESPONSE):
        self.calls = 0
        self.reply = reply

    def complete(self, prompt, c):
        self.calls += 1
        return self.reply


@pytest.mark.parametrize("interval,steps", [(1, 10), (5, 23), (5, 25), (3, 1), (7, 50)])
def test_cache_interval_counts(interval, steps):
    inner = CountingBackend()
    cached = CachedAdvisor(inner, interval)
    state = UavState((3, 3, 1), CameraConfig(), 1.0)
    for _ in range(steps):
        cached.advise("p", ctx(state))
    assert inner.calls == math.ceil(steps / interval) == cached.calls


def test_cache_refreshes_on_state_change():
    inner = CountingBackend()
    cached = CachedAdvisor(inner, 100)
    for x in range(4):
        cached.advise("p", ctx(UavState((x, 3, 1), CameraConfig(), 1.0)))
    assert inner.calls == 4


def test_cache_interval_one_is_transparent():
    env = CoverageEnv(EnvConfig())
    env.reset(1)
    direct, cached = ScriptedAdvisor(), CachedAdvisor(ScriptedAdvisor(), 1)
    rng = np.random.default_rng(0)
    for _ in range(30):
        c = ctx(env.state, env.coverage, env.obstacles)
        assert cached.advise("p", c).raw == direct.complete("p", c)
        env.step(int(rng.integers(0, 12)))


def test_cache_propagates_errors_only_on_refresh():
    inner = CountingBackend("garbage")
    cached = CachedAdvisor(inner, 1)
    with pytest.raises(AdviceUnparseable):
        cached.advise("p", ctx(UavState((1, 1, 1), CameraConfig(), 1.0)))


def test_record_then_replay_without_calls(tmp_path):
    record = tmp_path / "advice.jsonl"
    env = CoverageEnv(EnvConfig())
    rng = np.random.default_rng(0)
    recorder = CachedAdvisor(ScriptedAdvisor(), 2, record)
    seen = []
    contexts = []
    env.reset(4)
    for _ in range(40):
        c = ctx(env.state, env.coverage.copy(), env.obstacles)
        contexts.append(c)
        seen.append(recorder.advise("p", c).advice)
        env.step(int(rng.integers(0, 12)))
    lines = [json.loads(line) for line in record.read_text().splitlines()]
    assert len(lines) == recorder.calls
    assert set(lines[0]) == {"state_key", "raw_response", "advice", "latency"}

    replay_inner = ReplayAdvisor(record)
    replayer = CachedAdvisor(replay_inner, 2)
    replayed = [replayer.advise("p", c).advice for c in contexts]
    assert replayed == seen
    assert replay_inner._pos == len(lines)
    with pytest.raises(ReplayExhausted):
        replay_inner.complete("p", contexts[0])


def test_replay_detects_divergence(tmp_path):
    record = tmp_path / "advice.jsonl"
    CachedAdvisor(ScriptedAdvisor(), 1, record).advise("p", ctx(UavState((1, 1, 1), CameraConfig(), 1.0)))
    with pytest.raises(ReplayExhausted):
        ReplayAdvisor(record).complete("p", ctx(UavState((2, 2, 1), CameraConfig(), 1.0)))


def test_single_flight_collapses_concurrent_calls():
    flight = _SingleFlight()
    gate = threading.Event()
    calls = []

    def work():
        calls.append(1)
        gate.wait(2)
        return "done"

    results = []
    threads = [threading.Thread(target=lambda: results.append(flight.do("k", work))) for _ in range(6)]
    for t in threads:
        t.start()
    time.sleep(0.1)
    gate.set()
    for t in threads:
        t.join()
    assert results == ["done"] * 6
    assert len(calls) == 1


def test_state_key_buckets():
    s = UavState((1, 2, 0), CameraConfig(), 0.99)
    assert state_key(s, 0.5) == state_key(UavState((1, 2, 0), CameraConfig(), 0.96), 0.505)
    assert state_key(s, 0.5) != state_key(UavState((1, 2, 0), CameraConfig(), 0.94), 0.5)
    assert state_key(s, 0.5) != state_key(s, 0.52)


def test_make_advisor_validation(tmp_path):
    assert make_advisor({"kind": "scripted", "interval": 3}).interval == 3
    with pytest.raises(ValueError):
        make_advisor({"kind": "http"})
    with pytest.raises(ValueError):
        make_advisor({"kind": "oracle"})
    with pytest.raises(ValueError):
        make_advisor({"kind": "scripted", "interval": 0})
