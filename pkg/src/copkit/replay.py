"""Windowed replay memory with proportional prioritized sampling."""
from __future__ import annotations

import numpy as np

from .errors import EmptyBuffer, InvalidSlot, ZeroMass
from .learning import TransitionBatch, TransitionSample


class SumTree:
    """Complete binary tree of partial sums over ``capacity`` leaf priorities.

    Stored as a flat array of length ``2 * size`` (``size`` = capacity rounded
    up to a power of two); node ``i`` has children ``2i`` and ``2i + 1`` and
    the root is node 1. Parents are recomputed as ``left + right`` on every
    update, so internal nodes always equal the sum of their children exactly.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self.size = size
        self.nodes = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def __getitem__(self, i: int) -> float:
        return float(self.nodes[self.size + i])

    @property
    def leaves(self) -> np.ndarray:
        return self.nodes[self.size:self.size + self.capacity]

    def update(self, i: int, priority: float) -> None:
        if not 0 <= i < self.capacity:
            raise InvalidSlot(f"leaf {i} out of range [0, {self.capacity})")
        if not priority >= 0.0:
            raise ValueError(f"priority must be nonnegative, got {priority}")
        j = self.size + i
        self.nodes[j] = priority
        j //= 2
        while j >= 1:
            self.nodes[j] = self.nodes[2 * j] + self.nodes[2 * j + 1]
            j //= 2

    def update_many(self, idx, priorities) -> None:
        """Vectorized :meth:`update`; with repeated indices the last value wins."""
        idx = np.asarray(idx, dtype=np.int64)
        pr = np.asarray(priorities, dtype=np.float64)
        if idx.size == 0:
            return
        if idx.min() < 0 or idx.max() >= self.capacity:
            raise InvalidSlot(f"leaf index out of range [0, {self.capacity})")
        if not np.all(pr >= 0.0):
            raise ValueError("priorities must be nonnegative")
        nodes = self.nodes
        nodes[self.size + idx] = pr
        # duplicate parents are harmless: they receive the same sum twice
        j = (self.size + idx) // 2
        while j[0] >= 1:  # a one-leaf tree has no parents
            nodes[j] = nodes[2 * j] + nodes[2 * j + 1]
            j //= 2

    def find_many(self, masses) -> np.ndarray:
        """Vectorized :meth:`find` (same descent rule, so identical results)."""
        m = np.array(masses, dtype=np.float64)
        j = np.ones(m.shape, dtype=np.int64)
        nodes = self.nodes
        while j[0] < self.size:
            left = nodes[2 * j]
            go_left = ((m < left) & (left > 0.0)) | (nodes[2 * j + 1] <= 0.0)
            m = np.where(go_left, m, m - left)
            j = 2 * j + (~go_left)
        return j - self.size

    def find(self, mass: float) -> int:
        """Leaf whose cumulative-priority interval contains ``mass``.

        Never returns a zero-priority leaf while the total is positive: if
        rounding sends the walk towards an empty subtree it takes the sibling.
        """
        j = 1
        nodes = self.nodes
        while j < self.size:
            left = nodes[2 * j]
            if (mass < left and left > 0.0) or nodes[2 * j + 1] <= 0.0:
                j = 2 * j
            else:
                mass -= left
                j = 2 * j + 1
        return j - self.size

    def check(self, atol: float = 0.0) -> bool:
        """Every internal node equals the sum of its two children."""
        internal = self.nodes[1:self.size]
        kids = self.nodes[2:2 * self.size:2] + self.nodes[3:2 * self.size:2]
        return bool(np.all(np.abs(internal - kids) <= atol))


_FIELDS = ("state", "action", "next_state", "reward", "behavior_prob", "target_prob", "is_initial", "done")


class ReplayBuffer:
    """Circular buffer of transitions; the oldest entry is evicted at capacity.

    New entries get the running maximum priority (initially 1), so every
    transition can be drawn at least once before its priority is refreshed.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.tree = SumTree(capacity)
        self.state = np.zeros(capacity, dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.next_state = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.behavior_prob = np.ones(capacity)
        self.target_prob = np.zeros(capacity)
        self.is_initial = np.zeros(capacity, dtype=bool)
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0
        self.max_priority = 1.0

    def __len__(self) -> int:
        return self.size

    def push(self, sample: TransitionSample, done: bool = False) -> int:
        slot = self.cursor
        self.state[slot] = sample.state
        self.action[slot] = sample.action
        self.next_state[slot] = sample.next_state
        self.reward[slot] = sample.reward
        self.behavior_prob[slot] = sample.behavior_prob
        self.target_prob[slot] = sample.target_prob
        self.is_initial[slot] = sample.is_initial
        self.done[slot] = done
        self.tree.update(slot, self.max_priority)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return slot

    def _check_slot(self, slot: int) -> None:
        if not 0 <= slot < self.size:
            raise InvalidSlot(f"slot {slot} is not occupied (size {self.size})")

    def set_priority(self, slot: int, c_value: float) -> None:
        """Priority is the ratio estimate clipped at zero."""
        self._check_slot(slot)
        p = max(float(c_value), 0.0)
        self.tree.update(slot, p)
        if p > self.max_priority:
            self.max_priority = p

    def set_priorities(self, slots, values) -> None:
        slots = np.asarray(slots, dtype=np.int64)
        if slots.size == 0:
            return
        if slots.min() < 0 or slots.max() >= self.size:
            raise InvalidSlot(f"slots must be occupied (size {self.size})")
        p = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
        self.tree.update_many(slots, p)
        self.max_priority = max(self.max_priority, float(p.max()))

    def priority(self, slot: int) -> float:
        self._check_slot(slot)
        return self.tree[slot]

    def probabilities(self) -> np.ndarray:
        """Prioritized sampling probability of each occupied slot."""
        total = self.tree.total
        if total <= 0:
            raise ZeroMass("total priority is zero")
        return self.tree.leaves[: self.size] / total

    def batch(self, slots) -> TransitionBatch:
        slots = np.asarray(slots, dtype=np.int64)
        return TransitionBatch(
            self.state[slots], self.action[slots], self.next_state[slots], self.reward[slots],
            self.behavior_prob[slots], self.target_prob[slots], self.is_initial[slots],
        )

    def sample_prioritized(self, batch_size: int, rng: np.random.Generator):
        """Stratified proportional sampling: one uniform draw in each of
        ``batch_size`` equal slices of the total priority mass."""
        if self.size == 0:
            raise EmptyBuffer("cannot sample from an empty buffer")
        total = self.tree.total
        if total <= 0:
            raise ZeroMass("total priority is zero")
        seg = total / batch_size
        u = (np.arange(batch_size) + rng.random(batch_size)) * seg
        slots = self.tree.find_many(u)
        return self.batch(slots), slots

    def sample_uniform(self, batch_size: int, rng: np.random.Generator):
        if self.size == 0:
            raise EmptyBuffer("cannot sample from an empty buffer")
        slots = rng.integers(0, self.size, size=batch_size)
        return self.batch(slots), slots

    def summary(self) -> dict:
        pr = self.tree.leaves[: self.size]
        return {
            "capacity": self.capacity,
            "size": self.size,
            "cursor": self.cursor,
            "total_priority": self.tree.total,
            "max_priority": self.max_priority,
            "mean_priority": float(pr.mean()) if self.size else 0.0,
        }
