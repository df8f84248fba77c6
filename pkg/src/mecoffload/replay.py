"""Proportional prioritized replay memory backed by a sum tree."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ContractViolation


@dataclass(frozen=True)
class Transition:
    S: np.ndarray       # (N, 7)
    A: np.ndarray       # (N, 3) client actions in [0, 1]
    A_mas: np.ndarray   # (N,) accept mask
    reward: float
    S_next: np.ndarray  # (N, 7)
    done: bool


@dataclass
class Batch:
    S: np.ndarray
    A: np.ndarray
    A_mas: np.ndarray
    reward: np.ndarray
    S_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.reward.shape[0]


class ReplayMemory:
    """Ring buffer with proportional prioritisation.

    Stored leaf value is ``(|td| + eps_per) ** alpha``; new transitions get the
    current maximum leaf value. Importance weights are
    ``(size * P(i)) ** -beta`` divided by the largest possible weight in the
    memory, so they lie in (0, 1].
    """

    def __init__(self, capacity: int, n_devices: int, obs_dim: int = 7, act_dim: int = 3,
                 alpha: float = 0.6, beta: float = 0.4, eps_per: float = 1e-6):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.alpha = alpha
        self.beta = beta
        self.eps_per = eps_per
        self.S = np.zeros((capacity, n_devices, obs_dim))
        self.A = np.zeros((capacity, n_devices, act_dim))
        self.A_mas = np.zeros((capacity, n_devices), dtype=bool)
        self.reward = np.zeros(capacity)
        self.S_next = np.zeros((capacity, n_devices, obs_dim))
        self.done = np.zeros(capacity)
        tree_cap = 2
        while tree_cap < capacity:
            tree_cap *= 2
        self.tree = np.zeros(2 * tree_cap)
        self.size = 0
        self.pos = 0
        self.max_priority = 1.0

    def __len__(self):
        return self.size

    def push(self, tr: Transition):
        i = self.pos
        self.S[i] = tr.S
        self.A[i] = tr.A
        self.A_mas[i] = tr.A_mas
        self.reward[i] = tr.reward
        self.S_next[i] = tr.S_next
        self.done[i] = float(tr.done)
        _kernels.tree_update(self.tree, np.array([i], dtype=np.int64), np.array([self.max_priority]))
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def probabilities(self) -> np.ndarray:
        cap = self.tree.shape[0] // 2
        leaves = self.tree[cap:cap + self.size]
        return leaves / leaves.sum()

    def sample(self, m: int, rng: np.random.Generator):
        """Draw ``m`` indices i.i.d. with P(i) proportional to the stored priority."""
        if self.size == 0:
            raise ContractViolation("cannot sample from an empty replay memory")
        if m > self.size:
            raise ContractViolation(f"minibatch of {m} requested from {self.size} transitions")
        total = self.tree[1]
        idx = _kernels.tree_find(self.tree, rng.random(m) * total, self.size)
        cap = self.tree.shape[0] // 2
        probs = self.tree[cap + idx] / total
        p_min = self.tree[cap:cap + self.size].min() / total
        weights = (self.size * probs) ** (-self.beta) / (self.size * p_min) ** (-self.beta)
        batch = Batch(self.S[idx], self.A[idx], self.A_mas[idx], self.reward[idx],
                      self.S_next[idx], self.done[idx])
        return batch, weights, idx

    def update_priorities(self, indices, td_errors):
        td = np.abs(np.asarray(td_errors, dtype=float))
        if not np.all(np.isfinite(td)):
            raise ContractViolation("priorities must be finite")
        values = (td + self.eps_per) ** self.alpha
        indices = np.asarray(indices, dtype=np.int64)
        # a batch may repeat an index; keep the last value written for it
        rev_idx, first = np.unique(indices[::-1], return_index=True)
        values = values[::-1][first]
        _kernels.tree_update(self.tree, rev_idx, values)
        self.max_priority = max(self.max_priority, float(values.max()))


def replay_push(memory: ReplayMemory, transition: Transition):
    memory.push(transition)


def replay_sample(memory: ReplayMemory, m: int, rng: np.random.Generator):
    return memory.sample(m, rng)


def priority_update(memory: ReplayMemory, indices, td_errors):
    memory.update_priorities(indices, td_errors)
