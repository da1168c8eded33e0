"""Actor-critic MLP with explicit backprop, GAE and the clipped PPO update.

Everything is plain numpy in float64 so gradients can be checked against
finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import N_ACTIONS, PAN_MAX, TILT_MAX, ZOOM_MAX, ZOOM_MIN, CoverageMap, GridDims, Obstacle, UavState

PATCH = 5
BLOCK = 3  # each patch element summarises a BLOCK x BLOCK group of ground cells
OBS_DIM = 3 + 3 + 1 + 1 + PATCH * PATCH + 4

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w_pi", "b_pi", "w_v", "b_v")


class NonFiniteGradient(FloatingPointError):
    pass


class LengthMismatch(ValueError):
    pass


def encode_observation(state: UavState, coverage: CoverageMap, dims: GridDims,
                       obstacles: Sequence[Obstacle]) -> np.ndarray:
    """37-dim observation, every entry in [-1, 1].

    Layout: position / (size - 1) (3), tilt/90, pan/90, zoom rescaled to
    [0, 1] (3), battery (1), covered fraction (1), 5x5 patch centred on the
    UAV where each element is the covered fraction of a 3x3 block of ground
    cells, off-grid cells counting as covered (25), unit vector to the nearest
    obstacle centre plus surface distance / d_max (4).
    """
    obs = np.empty(OBS_DIM)
    x, y, z = state.position
    obs[0:3] = [c / (n - 1) if n > 1 else 0.0 for c, n in zip(state.position, dims.shape)]
    cam = state.camera
    obs[3] = cam.tilt / TILT_MAX
    obs[4] = cam.pan / PAN_MAX
    obs[5] = (cam.zoom - ZOOM_MIN) / (ZOOM_MAX - ZOOM_MIN)
    obs[6] = state.battery
    obs[7] = coverage.fraction

    # pad so the whole window is addressable; the UAV sits in the centre cell of the centre block
    h = (PATCH * BLOCK) // 2
    padded = np.ones((dims.x_size + 2 * h, dims.y_size + 2 * h))
    padded[h:h + dims.x_size, h:h + dims.y_size] = coverage.covered
    window = padded[x:x + 2 * h + 1, y:y + 2 * h + 1]
    patch = window.reshape(PATCH, BLOCK, PATCH, BLOCK).mean(axis=(1, 3))
    obs[8:8 + PATCH * PATCH] = patch.ravel()

    tail = obs[8 + PATCH * PATCH:]
    tail[:] = (0.0, 0.0, 0.0, 1.0)
    best = None
    for ob in obstacles:
        v = np.subtract(ob.center, state.position, dtype=float)
        dist = float(np.linalg.norm(v))
        surface = max(dist - ob.radius, 0.0)
        if best is None or surface < best[0]:
            best = (surface, v, dist)
    if best is not None:
        surface, v, dist = best
        if dist > 0:
            tail[0:3] = v / dist
        tail[3] = min(surface / dims.max_distance, 1.0) if dims.max_distance > 0 else 0.0
    return obs


# --- network ---------------------------------------------------------------

def init_params(obs_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                n_actions: int = N_ACTIONS) -> dict[str, np.ndarray]:
    h1, h2 = hidden

    def dense(n_in, n_out, gain):
        return rng.standard_normal((n_in, n_out)) * gain / math.sqrt(n_in)

    return {
        "w1": dense(obs_dim, h1, 1.0), "b1": np.zeros(h1),
        "w2": dense(h1, h2, 1.0), "b2": np.zeros(h2),
        "w_pi": dense(h2, n_actions, 0.01), "b_pi": np.zeros(n_actions),
        "w_v": dense(h2, 1, 1.0), "b_v": np.zeros(1),
    }


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def forward(params: dict, obs: np.ndarray):
    """Batch forward pass. Returns ``(logits, values, cache)``."""
    x = np.atleast_2d(obs)
    h1 = np.tanh(x @ params["w1"] + params["b1"])
    h2 = np.tanh(h1 @ params["w2"] + params["b2"])
    logits = h2 @ params["w_pi"] + params["b_pi"]
    values = (h2 @ params["w_v"] + params["b_v"])[:, 0]
    return logits, values, (x, h1, h2)


def policy_forward(params: dict, obs: np.ndarray) -> tuple[np.ndarray, float]:
    """Logits and state value for a single observation."""
    logits, values, _ = forward(params, obs)
    return logits[0], float(values[0])


def backward(params: dict, cache, d_logits: np.ndarray, d_values: np.ndarray) -> dict:
    x, h1, h2 = cache
    grads = {
        "w_pi": h2.T @ d_logits, "b_pi": d_logits.sum(0),
        "w_v": h2.T @ d_values[:, None], "b_v": np.array([d_values.sum()]),
    }
    d_h2 = d_logits @ params["w_pi"].T + d_values[:, None] @ params["w_v"].T
    d_a2 = d_h2 * (1.0 - h2 ** 2)
    grads["w2"] = h1.T @ d_a2
    grads["b2"] = d_a2.sum(0)
    d_a1 = (d_a2 @ params["w2"].T) * (1.0 - h1 ** 2)
    grads["w1"] = x.T @ d_a1
    grads["b1"] = d_a1.sum(0)
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# --- advantage estimation ---------------------------------------------------

def compute_gae(rewards, values, dones, gamma: float, gae_lambda: float,
                last_value: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns.

    ``last_value`` bootstraps the step after the final one when that step is
    not terminal.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not (len(rewards) == len(values) == len(dones)):
        raise LengthMismatch(f"rewards/values/dones lengths differ: "
                             f"{len(rewards)}, {len(values)}, {len(dones)}")
    n = len(rewards)
    adv = np.zeros(n)
    next_value = last_value
    running = 0.0
    for t in range(n - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * gae_lambda * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# --- PPO ---------------------------------------------------------------------

def clipped_surrogate(ratio, advantage, clip_epsilon: float):
    """Elementwise min(r A, clip(r, 1-eps, 1+eps) A)."""
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon) * advantage)


@dataclass
class LossStats:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


def ppo_loss_and_grads(params: dict, obs, actions, old_log_probs, advantages, returns,
                       clip_epsilon: float, entropy_coef: float, value_coef: float):
    """Total loss = -mean(surrogate) - c_ent * mean(entropy) + c_v * mean((V - R)^2), with gradients."""
    actions = np.asarray(actions, dtype=int)
    n = len(actions)
    logits, values, cache = forward(params, obs)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_log_probs)

    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon) * advantages
    surrogate = np.minimum(unclipped, clipped)
    entropy = -(probs * logp_all).sum(1)
    value_err = values - returns

    policy_loss = -surrogate.mean()
    value_loss = (value_err ** 2).mean()
    loss = policy_loss - entropy_coef * entropy.mean() + value_coef * value_loss

    # d(surrogate)/d(log pi(a)) is r*A where the unclipped branch is active, else 0
    active = unclipped <= clipped
    d_logp = np.where(active, ratio * advantages, 0.0)
    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    d_logits = -(d_logp[:, None] * (onehot - probs)) / n
    # dH/dz_j = -p_j (log p_j + H)
    d_entropy = -probs * (logp_all + entropy[:, None])
    d_logits -= entropy_coef * d_entropy / n
    d_values = value_coef * 2.0 * value_err / n

    grads = backward(params, cache, d_logits, d_values)
    stats = LossStats(
        loss=float(loss), policy_loss=float(policy_loss), value_loss=float(value_loss),
        entropy=float(entropy.mean()), approx_kl=float(np.mean(old_log_probs - logp)),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > clip_epsilon)),
    )
    return loss, stats, grads


class Adam:
    def __init__(self, params: dict, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        out = {}
        for k, p in params.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.m = {k: np.asarray(v, dtype=float) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=float) for k, v in state["v"].items()}


def clip_grad_norm(grads: dict, max_norm: Optional[float]) -> float:
    norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class Rollout:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.actions)

    def add(self, obs, action, log_prob, value, reward, done):
        self.obs.append(obs)
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    def finish(self, gamma: float, gae_lambda: float, last_value: float = 0.0):
        self.advantages, self.returns = compute_gae(self.rewards, self.values, self.dones,
                                                    gamma, gae_lambda, last_value)


def ppo_update(params: dict, optimizer: Adam, rollout: Rollout, cfg, rng: np.random.Generator):
    """Run ``cfg.epochs_per_update`` epochs of minibatch PPO on a finished rollout.

    Returns the new parameters and the mean loss statistics.  Raises
    :class:`NonFiniteGradient` without touching ``params`` or the optimizer
    if any gradient is NaN or infinite.
    """
    if rollout.advantages is None:
        raise ValueError("call rollout.finish() before ppo_update()")
    n = len(rollout)
    if cfg.minibatch_size > n:
        raise ValueError(f"minibatch_size {cfg.minibatch_size} exceeds rollout length {n}")
    obs = np.asarray(rollout.obs)
    actions = np.asarray(rollout.actions)
    old_logp = np.asarray(rollout.log_probs)
    returns = rollout.returns
    adv = rollout.advantages
    if cfg.normalize_advantages and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    # optimizer.step returns fresh arrays, so the caller's params stay intact on abort
    opt_snapshot = (optimizer.t, {k: v.copy() for k, v in optimizer.m.items()},
                    {k: v.copy() for k, v in optimizer.v.items()})
    history = []
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n - cfg.minibatch_size + 1, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            _, stats, grads = ppo_loss_and_grads(params, obs[idx], actions[idx], old_logp[idx], adv[idx],
                                                 returns[idx], cfg.clip_epsilon, cfg.entropy_coef,
                                                 cfg.value_coef)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                optimizer.t, optimizer.m, optimizer.v = opt_snapshot
                raise NonFiniteGradient("non-finite gradient; update aborted")
            clip_grad_norm(grads, cfg.max_grad_norm)
            params = optimizer.step(params, grads)
            history.append(stats)
    if not all(np.all(np.isfinite(p)) for p in params.values()):
        optimizer.t, optimizer.m, optimizer.v = opt_snapshot
        raise NonFiniteGradient("update produced non-finite parameters")
    mean = {f: float(np.mean([getattr(s, f) for s in history])) for f in LossStats.__dataclass_fields__}
    return params, LossStats(**mean)
