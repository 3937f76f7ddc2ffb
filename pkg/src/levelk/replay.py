"""Proportional prioritized experience replay backed by an array sum-tree."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _tree_update(nodes, size, indices, values):
    for k in range(indices.shape[0]):
        node = indices[k] + size
        nodes[node] = values[k]
        node >>= 1
        while node >= 1:
            nodes[node] = nodes[2 * node] + nodes[2 * node + 1]
            node >>= 1


@njit(cache=True)
def _tree_find(nodes, size, mass):
    out = np.empty(mass.shape[0], np.int64)
    for k in range(mass.shape[0]):
        m, node = mass[k], 1
        while node < size:
            left = 2 * node
            if m >= nodes[left]:
                m -= nodes[left]
                node = left + 1
            else:
                node = left
        out[k] = node - size
    return out


class SumTree:
    """Complete binary tree over ``capacity`` leaves stored in one flat array.

    Node ``k`` has children ``2k`` and ``2k + 1``; the root is node 1 and leaf
    ``i`` is node ``size + i`` where ``size`` is ``capacity`` rounded up to a
    power of two. Updates recompute the touched ancestors level by level, so
    each internal node is always the exact floating-point sum of its children.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.size = 1 << max(0, (self.capacity - 1).bit_length())
        self.nodes = np.zeros(2 * self.size)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    @property
    def leaves(self) -> np.ndarray:
        return self.nodes[self.size : self.size + self.capacity]

    def update(self, indices, values) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        values = np.broadcast_to(np.asarray(values, dtype=float), indices.shape)
        if np.any((indices < 0) | (indices >= self.capacity)):
            raise IndexError("leaf index out of range")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("priorities must be finite and non-negative")
        _tree_update(self.nodes, self.size, np.ascontiguousarray(indices), np.ascontiguousarray(values))

    def find(self, mass) -> np.ndarray:
        """Leaf indices whose cumulative-sum interval contains each ``mass``."""
        mass = np.asarray(mass, dtype=float)
        return _tree_find(self.nodes, self.size, mass.ravel()).reshape(mass.shape)


class PrioritizedBuffer:
    """Ring buffer of transitions sampled with probability ``p_i**alpha / sum_j p_j**alpha``.

    New transitions enter with the largest priority seen so far so that each is
    replayed at least once with high probability.
    """

    def __init__(self, capacity: int, obs_dim: int, alpha: float = 0.6, eps: float = 1e-3):
        if alpha < 0 or eps <= 0:
            raise ValueError("alpha must be >= 0 and eps > 0")
        self.capacity = int(capacity)
        self.alpha = alpha
        self.eps = eps
        self.tree = SumTree(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.max_priority = 1.0
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def push(self, obs, action, reward, next_obs, done, priority: float | None = None) -> int:
        """Store one transition, overwriting the oldest when full. Returns its slot."""
        i = self.cursor
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = done
        p = self.max_priority if priority is None else float(priority)
        if not p > 0:
            raise ValueError("priority must be positive")
        self.max_priority = max(self.max_priority, p)
        self.tree.update([i], p**self.alpha)
        self.cursor = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)
        return i

    def probabilities(self) -> np.ndarray:
        """Sampling probability of every stored transition."""
        return self.tree.leaves[: self.count] / self.tree.total

    def sample(self, batch_size: int, rng: np.random.Generator, beta: float = 0.4):
        """Draw ``batch_size`` slots with replacement.

        Returns ``(indices, importance_weights)`` where the weights are
        ``(N * P(i))**-beta`` divided by the largest such weight in the buffer.
        """
        if self.count == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self.tree.total
        mass = rng.random(batch_size) * total
        idx = self.tree.find(mass)
        # guard against round-off landing on an empty leaf past the fill level
        idx = np.minimum(idx, self.count - 1)
        leaves = self.tree.leaves[: self.count]
        probs = leaves[idx] / total
        p_min = leaves.min() / total
        weights = (probs / p_min) ** (-beta)
        return idx, weights

    def batch(self, indices):
        return (self.obs[indices], self.actions[indices], self.rewards[indices],
                self.next_obs[indices], self.dones[indices])

    def update_priorities(self, indices, td_errors) -> None:
        """Set priorities to ``|td| + eps``."""
        p = np.abs(np.asarray(td_errors, dtype=float)) + self.eps
        self.max_priority = max(self.max_priority, float(p.max()))
        self.tree.update(indices, p**self.alpha)
