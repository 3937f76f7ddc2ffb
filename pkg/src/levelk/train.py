"""Deep Q-learning for one curriculum level.

Double Q-learning targets, proportional prioritized replay, a periodically
synchronized target network and linearly decaying epsilon-greedy exploration.
Environments follow the ``reset(rng) -> obs`` /
``step(a) -> (obs, r, terminated, truncated, info)`` protocol; ``info`` may
carry an ``"outcome"`` used for the learning curve.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .qnet import AdamState, NetworkConfig, NetworkWeights, forward, gradient, init_weights, optimizer_step
from .replay import PrioritizedBuffer

CURVE_HEADER = ("step", "success_rate", "collision_rate", "timeout_rate", "mean_return", "epsilon")


class TrainingDiverged(FloatingPointError):
    """Raised when the TD loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 500_000
    gamma: float = 0.99
    lr: float = 1e-4
    batch_size: int = 32
    target_sync: int = 2_000
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_steps: int = 50_000
    capacity: int = 100_000
    warmup: int = 1_000
    eval_interval: int = 25_000
    eval_episodes: int = 50
    alpha_p: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    eps_p: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not (0 <= self.eps_start <= 1 and 0 <= self.eps_end <= 1):
            raise ValueError("epsilon endpoints must lie in [0, 1]")
        if self.total_steps < 0 or self.eps_decay_steps < 0 or self.warmup < 0:
            raise ValueError("step counts must be non-negative")
        if self.batch_size < 1 or self.capacity < 1 or self.target_sync < 1:
            raise ValueError("batch size, capacity and target sync must be positive")
        if self.lr <= 0 or self.eps_p <= 0 or self.alpha_p < 0:
            raise ValueError("lr and eps_p must be positive, alpha_p non-negative")


def epsilon(cfg: TrainConfig, step: int) -> float:
    """Linear decay from ``eps_start`` to ``eps_end`` over ``eps_decay_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if cfg.eps_decay_steps == 0 or step >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = step / cfg.eps_decay_steps
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def beta(cfg: TrainConfig, step: int) -> float:
    if cfg.total_steps == 0:
        return cfg.beta_end
    frac = min(1.0, step / cfg.total_steps)
    return cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start)


def double_dqn_target(rewards, next_obs, dones, online: NetworkWeights, target: NetworkWeights, gamma: float):
    """``r + gamma * Q_target(s', argmax_a Q_online(s', a))``, or ``r`` when done."""
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    q_next = forward(online, np.atleast_2d(next_obs))
    best = np.argmax(q_next, axis=1)
    q_eval = forward(target, np.atleast_2d(next_obs))[np.arange(len(best)), best]
    return rewards + gamma * np.where(dones, 0.0, q_eval)


def greedy_action(w: NetworkWeights, obs) -> int:
    return int(np.argmax(forward(w, obs)))


def act(w: NetworkWeights, obs, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action. One uniform draw decides exploration, a second picks the action."""
    if rng.random() < eps:
        return int(rng.integers(w.config.n_actions))
    return greedy_action(w, obs)


def evaluate_greedy(env, w: NetworkWeights, n_episodes: int, rng: np.random.Generator):
    """Greedy roll-outs. Returns ``(success, collision, timeout, mean_return)``."""
    counts = {"success": 0, "collision": 0, "timeout": 0}
    returns = []
    for _ in range(n_episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            obs, r, terminated, truncated, info = env.step(greedy_action(w, obs))
            total += r
            if terminated or truncated:
                break
        outcome = info.get("outcome")
        if outcome in counts:
            counts[outcome] += 1
        returns.append(total)
    n = max(n_episodes, 1)
    return (counts["success"] / n, counts["collision"] / n, counts["timeout"] / n,
            float(np.mean(returns)) if returns else 0.0)


@dataclass
class TrainResult:
    weights: NetworkWeights
    curve: list[tuple]
    updates: int = 0
    episodes: int = 0


def train_level(
    env_factory: Callable[[], object],
    init: NetworkWeights | None,
    cfg: TrainConfig,
    rng: np.random.Generator,
    net: NetworkConfig = NetworkConfig(),
    progress: Callable[[int, tuple], None] | None = None,
    eval_env_factory: Callable[[], object] | None = None,
) -> TrainResult:
    """Train one Q-network and return it with its learning curve.

    One gradient update follows every decision step once the buffer holds
    ``warmup`` transitions. Every ``eval_interval`` steps (and at the end) the
    greedy policy is evaluated on the same fixed set of episode seeds and a row
    ``(step, success, collision, timeout, mean_return, epsilon)`` is appended.
    Evaluation episodes come from ``eval_env_factory`` (default: ``env_factory``).
    """
    online = init_weights(net, rng) if init is None else init.copy()
    if cfg.total_steps == 0:
        return TrainResult(online, [])
    eval_seed = int(rng.integers(2**63))
    target = online.copy()
    opt = AdamState(lr=cfg.lr)
    obs_dim = online.config.input_dim
    buf = PrioritizedBuffer(min(cfg.capacity, cfg.total_steps), obs_dim, cfg.alpha_p, cfg.eps_p)
    env = env_factory()
    eval_env = (eval_env_factory or env_factory)() if cfg.eval_episodes > 0 else None
    curve: list[tuple] = []
    updates = episodes = 0

    obs = env.reset(rng)
    for step in range(cfg.total_steps):
        eps = epsilon(cfg, step)
        a = act(online, obs, eps, rng)
        nxt, r, terminated, truncated, _ = env.step(a)
        buf.push(obs, a, r, nxt, terminated)
        if terminated or truncated:
            episodes += 1
            obs = env.reset(rng)
        else:
            obs = nxt

        if len(buf) >= max(cfg.warmup, 1):
            idx, iw = buf.sample(cfg.batch_size, rng, beta(cfg, step))
            s, acts, rew, s2, done = buf.batch(idx)
            y = double_dqn_target(rew, s2, done, online, target, cfg.gamma)
            loss, grads, td = gradient(online, s, acts, y, iw)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}")
            online, opt = optimizer_step(online, grads, opt)
            buf.update_priorities(idx, td)
            updates += 1
            if updates % cfg.target_sync == 0:
                target = online.copy()

        done_steps = step + 1
        if eval_env is not None and (done_steps % cfg.eval_interval == 0 or done_steps == cfg.total_steps):
            if not curve or curve[-1][0] != done_steps:
                stats = evaluate_greedy(eval_env, online, cfg.eval_episodes, np.random.default_rng(eval_seed))
                row = (done_steps, *stats, epsilon(cfg, done_steps))
                curve.append(row)
                if progress is not None:
                    progress(done_steps, row)
    return TrainResult(online, curve, updates, episodes)


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for step, s, c, t, ret, eps in curve:
            w.writerow([int(step), repr(float(s)), repr(float(c)), repr(float(t)), repr(float(ret)), repr(float(eps))])


def read_curve(path) -> list[tuple]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CURVE_HEADER:
        raise ValueError("not a learning-curve file")
    return [(int(r[0]), *map(float, r[1:])) for r in rows[1:]]
