"""Prioritized experience replay.

Entries carry priorities derived from TD errors (magnitude plus a small
floor, so zero-error experience keeps a nonzero chance of being drawn).
Sampling is proportional to priority**alpha via a cumulative-sum tree, and
each sampled entry gets an importance weight (N * P(x))**-beta, normalized
by the largest weight in the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PERConfig:
    alpha: float = 0.6
    beta0: float = 0.4
    total_iterations: int = 1000
    epsilon: float = 1e-6
    capacity: int = 4096

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if not (0.0 <= self.beta0 <= 1.0):
            raise ValidationError("beta0 must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if self.capacity < 1 or self.total_iterations < 1:
            raise ValidationError("capacity and total_iterations must be >= 1")


def beta_at(config: PERConfig, iteration: int) -> float:
    """Linear anneal from beta0 to exactly 1.0 at the final iteration."""
    if config.total_iterations <= 1:
        return 1.0
    frac = min(1.0, max(0.0, iteration / (config.total_iterations - 1)))
    return config.beta0 + (1.0 - config.beta0) * frac


class SumTree:
    """Complete binary tree over leaf masses supporting O(log N) prefix-sum
    descent and point updates. Capacity rounds up to a power of two; unused
    leaves keep zero mass and are never drawn."""

    def __init__(self, capacity: int):
        self.capacity = 1
        while self.capacity < capacity:
            self.capacity *= 2
        self.nodes = np.zeros(2 * self.capacity - 1)

    def total(self) -> float:
        return float(self.nodes[0])

    def set(self, leaf: int, mass: float):
        idx = leaf + self.capacity - 1
        change = mass - self.nodes[idx]
        self.nodes[idx] = mass
        while idx > 0:
            idx = (idx - 1) // 2
            self.nodes[idx] += change

    def get(self, leaf: int) -> float:
        return float(self.nodes[leaf + self.capacity - 1])

    def find(self, mass: float) -> int:
        """Leaf index owning the prefix-sum position ``mass``."""
        idx = 0
        while idx < self.capacity - 1:
            left = 2 * idx + 1
            if mass <= self.nodes[left] or self.nodes[left + 1] <= 0.0:
                idx = left
            else:
                mass -= self.nodes[left]
                idx = left + 1
        return idx - (self.capacity - 1)


@dataclass
class SampleRecord:
    item: object
    entry_id: int
    priority: float
    probability: float
    weight: float


@dataclass
class _Entry:
    entry_id: int
    item: object
    priority: float


class PrioritizedBuffer:
    """Bounded FIFO store with proportional prioritized sampling.

    ``push`` ids increase monotonically; at capacity the oldest entry is
    overwritten. Priority updates through a stale id (already evicted) are
    ignored with a log notice.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, epsilon: float = 1e-6):
        if capacity < 1:
            raise ValidationError("capacity must be >= 1")
        if alpha < 0 or epsilon <= 0:
            raise ValidationError("alpha must be >= 0 and epsilon > 0")
        self.capacity = capacity
        self.alpha = alpha
        self.epsilon = epsilon
        self._slots: list[_Entry | None] = [None] * capacity
        self._tree = SumTree(capacity)
        self._next_id = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _store_priority(self, td_error: float) -> float:
        return abs(td_error) + self.epsilon

    def push(self, item, td_error: float) -> int:
        """Store with priority |td_error| + epsilon; returns the entry id."""
        return self.push_priority(item, self._store_priority(td_error))

    def push_priority(self, item, priority: float) -> int:
        """Store with an explicit pre-floored priority."""
        if priority <= 0:
            raise ValidationError("priorities must be positive")
        entry_id = self._next_id
        self._next_id += 1
        slot = entry_id % self.capacity
        self._slots[slot] = _Entry(entry_id, item, priority)
        self._tree.set(slot, priority ** self.alpha)
        self._size = min(self._size + 1, self.capacity)
        return entry_id

    def items_fifo(self) -> list:
        """Live items in insertion order."""
        start = max(0, self._next_id - self._size)
        return [self._slots[eid % self.capacity].item
                for eid in range(start, self._next_id)]

    def get_priority(self, entry_id: int) -> float | None:
        slot = entry_id % self.capacity
        entry = self._slots[slot]
        if entry is None or entry.entry_id != entry_id:
            return None
        return entry.priority

    def update_priority(self, entry_id: int, td_error: float) -> bool:
        """Re-prioritize a stored entry; returns False if it was evicted."""
        slot = entry_id % self.capacity
        entry = self._slots[slot]
        if entry is None or entry.entry_id != entry_id:
            log.info("ignoring priority update for evicted entry %d", entry_id)
            return False
        entry.priority = self._store_priority(td_error)
        self._tree.set(slot, entry.priority ** self.alpha)
        return True

    def set_alpha(self, alpha: float):
        """Re-exponentiate stored priorities under a new alpha (O(N))."""
        if alpha < 0:
            raise ValidationError("alpha must be >= 0")
        self.alpha = alpha
        for slot, entry in enumerate(self._slots):
            if entry is not None:
                self._tree.set(slot, entry.priority ** alpha)

    def probabilities(self) -> dict[int, float]:
        """Current sampling probability of every live entry."""
        total = self._tree.total()
        out = {}
        for slot, entry in enumerate(self._slots):
            if entry is not None:
                out[entry.entry_id] = self._tree.get(slot) / total
        return out

    def sample(self, count: int, beta: float, rng: np.random.Generator,
               alpha: float | None = None) -> list[SampleRecord]:
        """Draw ``count`` entries proportionally to priority**alpha.

        Weights are (N * P(x))**-beta scaled so the largest weight in the
        returned batch is exactly 1.
        """
        if self._size == 0:
            raise ValidationError("cannot sample from an empty buffer")
        if count < 1:
            raise ValidationError("count must be >= 1")
        if alpha is not None and alpha != self.alpha:
            self.set_alpha(alpha)

        total = self._tree.total()
        records = []
        for u in rng.uniform(0.0, total, size=count):
            slot = self._tree.find(float(u))
            entry = self._slots[slot]
            prob = self._tree.get(slot) / total
            raw_weight = (self._size * prob) ** (-beta)
            records.append(SampleRecord(
                item=entry.item,
                entry_id=entry.entry_id,
                priority=entry.priority,
                probability=prob,
                weight=raw_weight,
            ))
        top = max(r.weight for r in records)
        for r in records:
            r.weight /= top
        return records
