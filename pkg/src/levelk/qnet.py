"""Dueling Q-network with a weight-shared per-vehicle encoder, in plain numpy.

Layout (default sizes)::

    neighbor slot (4) -> 32 -> 64   shared across the 8 slots, max-pooled
    ego features  (4) -> 32
    concat (64 + 32)  -> 64
    value 64 -> 1, advantage 64 -> 6,  Q = V + A - mean(A)

All hidden layers use ReLU. Parameters are float64 throughout.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAGIC = b"LKQN"
FORMAT_VERSION = 1
TASK_TAGS = {"merge": 0, "keep_lane": 1}


@dataclass(frozen=True)
class NetworkConfig:
    ego_dim: int = 4
    slot_dim: int = 4
    n_slots: int = 8
    enc1: int = 32
    enc2: int = 64
    ego_hidden: int = 32
    trunk: int = 64
    n_actions: int = 6

    @property
    def input_dim(self) -> int:
        return self.ego_dim + self.n_slots * self.slot_dim

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("enc1_w", (self.slot_dim, self.enc1)),
            ("enc1_b", (self.enc1,)),
            ("enc2_w", (self.enc1, self.enc2)),
            ("enc2_b", (self.enc2,)),
            ("ego_w", (self.ego_dim, self.ego_hidden)),
            ("ego_b", (self.ego_hidden,)),
            ("trunk_w", (self.enc2 + self.ego_hidden, self.trunk)),
            ("trunk_b", (self.trunk,)),
            ("value_w", (self.trunk, 1)),
            ("value_b", (1,)),
            ("adv_w", (self.trunk, self.n_actions)),
            ("adv_b", (self.n_actions,)),
        ]

    def fingerprint(self) -> int:
        """64-bit hash of the layer dimensions."""
        dims = ";".join(f"{name}:{'x'.join(map(str, shape))}" for name, shape in self.layer_shapes())
        return int.from_bytes(hashlib.sha256(dims.encode()).digest()[:8], "little")


@lru_cache(maxsize=None)
def _layout(config: NetworkConfig):
    spans, k = [], 0
    for name, shape in config.layer_shapes():
        size = int(np.prod(shape))
        spans.append((name, shape, k, k + size))
        k += size
    return tuple(spans), k


class NetworkWeights(dict):
    """Ordered mapping ``layer name -> array`` plus the config it was built for.

    All layers are views into one contiguous parameter vector (:attr:`vector`),
    in declaration order.
    """

    def __init__(self, config: NetworkConfig, arrays=None):
        super().__init__()
        self.config = config
        spans, total = _layout(config)
        self.vector = np.zeros(total)
        arrays = arrays or {}
        for name, shape, start, end in spans:
            view = self.vector[start:end].reshape(shape)
            if name in arrays:
                a = np.asarray(arrays[name], dtype=np.float64)
                if a.shape != shape:
                    raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
                view[...] = a
            self[name] = view

    @classmethod
    def from_vector(cls, config: NetworkConfig, vector) -> "NetworkWeights":
        w = cls(config)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != w.vector.shape:
            raise ValueError(f"expected {w.vector.size} parameters, got {vector.size}")
        w.vector[...] = vector
        return w

    def copy(self) -> "NetworkWeights":
        return NetworkWeights.from_vector(self.config, self.vector)

    def flat(self) -> np.ndarray:
        return self.vector.copy()

    def assign_flat(self, vector) -> "NetworkWeights":
        return NetworkWeights.from_vector(self.config, vector)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector)))

    def equals(self, other: "NetworkWeights") -> bool:
        return self.config == other.config and np.array_equal(self.vector, other.vector)


def init_weights(config: NetworkConfig, rng: np.random.Generator) -> NetworkWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every matrix and its bias."""
    arrays = {}
    fan_in = None
    for name, shape in config.layer_shapes():
        if name.endswith("_w"):
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return NetworkWeights(config, arrays)


def _relu(x):
    return np.maximum(x, 0.0)


def _forward(w: NetworkWeights, obs: np.ndarray):
    cfg = w.config
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    ego = obs[:, : cfg.ego_dim]
    slots = obs[:, cfg.ego_dim :].reshape(len(obs), cfg.n_slots, cfg.slot_dim)
    h1 = _relu(slots @ w["enc1_w"] + w["enc1_b"])
    h2 = _relu(h1 @ w["enc2_w"] + w["enc2_b"])
    pooled = h2.max(axis=1)
    e = _relu(ego @ w["ego_w"] + w["ego_b"])
    z = np.concatenate([pooled, e], axis=1)
    t = _relu(z @ w["trunk_w"] + w["trunk_b"])
    v = t @ w["value_w"] + w["value_b"]
    a = t @ w["adv_w"] + w["adv_b"]
    q = v + a - a.sum(axis=1, keepdims=True) / cfg.n_actions
    cache = (ego, slots, h1, h2, e, z, t)
    return q, v[:, 0], a, cache


def forward(w: NetworkWeights, obs) -> np.ndarray:
    """Q-values for one observation ``(input_dim,)`` or a batch ``(B, input_dim)``."""
    obs = np.asarray(obs, dtype=np.float64)
    q = _forward(w, obs)[0]
    # every parameter reaches q through a product, so a NaN or inf anywhere shows up here
    if not np.isfinite(q).all():
        if not w.is_finite():
            raise ValueError("network weights contain non-finite values")
        raise ValueError("non-finite Q-values (check the observation)")
    return q[0] if obs.ndim == 1 else q


def value_and_advantage(w: NetworkWeights, obs) -> tuple[np.ndarray, np.ndarray]:
    _, v, a, _ = _forward(w, obs)
    return v, a


def greedy(w: NetworkWeights, obs) -> np.ndarray:
    """Action indices maximizing Q for a batch of observations."""
    return np.argmax(_forward(w, obs)[0], axis=1)


def gradient(w: NetworkWeights, obs, actions, targets, weights=None):
    """Importance-weighted squared TD loss and its exact gradient.

    ``loss = mean_i  w_i * (y_i - Q(s_i, a_i))**2``. Returns
    ``(loss, grads, td_errors)`` where ``grads`` mirrors ``w`` and
    ``td_errors = y - Q(s, a)`` per sample.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise ValueError("non-finite TD targets")
    actions = np.asarray(actions, dtype=np.int64)
    B = len(targets)
    if B == 0:
        raise ValueError("empty batch")
    weights = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    cfg = w.config
    q, _, _, (ego, slots, h1, h2, e, z, t) = _forward(w, obs)
    rows = np.arange(B)
    td = targets - q[rows, actions]
    loss = float(np.mean(weights * td**2))

    dq = np.zeros_like(q)
    dq[rows, actions] = -2.0 * weights * td / B
    dv = dq.sum(axis=1, keepdims=True)
    da = dq - dq.mean(axis=1, keepdims=True)

    g = {}
    g["value_w"] = t.T @ dv
    g["value_b"] = dv.sum(axis=0)
    g["adv_w"] = t.T @ da
    g["adv_b"] = da.sum(axis=0)
    dt = (dv @ w["value_w"].T + da @ w["adv_w"].T) * (t > 0)
    g["trunk_w"] = z.T @ dt
    g["trunk_b"] = dt.sum(axis=0)
    dz = dt @ w["trunk_w"].T
    dpool, de = dz[:, : cfg.enc2], dz[:, cfg.enc2 :]
    de = de * (e > 0)
    g["ego_w"] = ego.T @ de
    g["ego_b"] = de.sum(axis=0)
    # max-pool routes the gradient to the first slot attaining the maximum
    arg = np.argmax(h2, axis=1)
    dh2 = np.zeros_like(h2)
    np.put_along_axis(dh2, arg[:, None, :], dpool[:, None, :], axis=1)
    dh2 *= h2 > 0
    flat_h1 = h1.reshape(-1, cfg.enc1)
    flat_dh2 = dh2.reshape(-1, cfg.enc2)
    g["enc2_w"] = flat_h1.T @ flat_dh2
    g["enc2_b"] = flat_dh2.sum(axis=0)
    dh1 = (flat_dh2 @ w["enc2_w"].T) * (flat_h1 > 0)
    g["enc1_w"] = slots.reshape(-1, cfg.slot_dim).T @ dh1
    g["enc1_b"] = dh1.sum(axis=0)
    return loss, NetworkWeights(cfg, g), td


@dataclass
class AdamState:
    """Adam moments over the flat parameter vector."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(w: NetworkWeights, grads: NetworkWeights, opt: AdamState):
    """Adam update with bias correction. Returns new ``(weights, state)``; inputs are untouched."""
    if grads.config != w.config:
        raise ValueError("gradient layers do not match the weights")
    g = grads.vector
    m = np.zeros_like(g) if opt.m is None else opt.m
    v = np.zeros_like(g) if opt.v is None else opt.v
    step = opt.step + 1
    m = opt.beta1 * m + (1.0 - opt.beta1) * g
    v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
    m_hat = m / (1.0 - opt.beta1**step)
    v_hat = v / (1.0 - opt.beta2**step)
    new = w.vector - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    state = AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, step, m, v)
    return NetworkWeights.from_vector(w.config, new), state


# --------------------------------------------------------------------------
# weights file
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQBB")


def dumps_weights(w: NetworkWeights, task: str, level: int) -> bytes:
    if task not in TASK_TAGS:
        raise ValueError(f"unknown task {task!r}")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, w.config.fingerprint(), TASK_TAGS[task], int(level))
    body = np.ascontiguousarray(w.vector, dtype="<f8").tobytes()
    return head + body


def loads_weights(data: bytes, config: NetworkConfig = NetworkConfig()):
    """Parse a weights blob. Returns ``(weights, task, level)``."""
    if len(data) < _HEADER.size:
        raise ValueError("truncated weights file")
    magic, version, fingerprint, tag, level = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("not a weights file (bad magic)")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version}")
    if fingerprint != config.fingerprint():
        raise ValueError("weights were saved for a different network configuration")
    tasks = {v: k for k, v in TASK_TAGS.items()}
    if tag not in tasks:
        raise ValueError(f"unknown task tag {tag}")
    arrays, k = {}, _HEADER.size
    for name, shape in config.layer_shapes():
        size = int(np.prod(shape)) * 8
        if k + size > len(data):
            raise ValueError("truncated weights file")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=k).astype(np.float64).reshape(shape)
        k += size
    if k != len(data):
        raise ValueError("trailing bytes in weights file")
    return NetworkWeights(config, arrays), tasks[tag], level


def save_weights(w: NetworkWeights, path, task: str, level: int) -> None:
    with open(path, "wb") as f:
        f.write(dumps_weights(w, task, level))


def load_weights(path, config: NetworkConfig = NetworkConfig()):
    """Read a weights file written by :func:`save_weights`. Returns ``(weights, task, level)``."""
    with open(path, "rb") as f:
        return loads_weights(f.read(), config)
