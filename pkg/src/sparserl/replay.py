"""Replay storage with n-step segment sampling and policy-distance capacity control."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    episode_id: int
    step_in_episode: int


@dataclass
class NStepSegment:
    state: np.ndarray
    action: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray  # s_{t+1} .. s_{t+m}; the last row is the bootstrap state
    effective_n: int
    terminal: bool

    @property
    def bootstrap_state(self) -> np.ndarray:
        return self.next_states[-1]


@dataclass
class NStepBatch:
    """A mini-batch of segments laid out as padded arrays.

    ``rewards`` and ``next_states`` have ``n`` slots; slots at or beyond a
    row's ``effective_n`` are zero-filled.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    effective_n: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def bootstrap_states(self) -> np.ndarray:
        return self.next_states[np.arange(len(self)), self.effective_n - 1]

    def segment(self, i: int) -> NStepSegment:
        m = int(self.effective_n[i])
        return NStepSegment(
            self.states[i], self.actions[i], self.rewards[i, :m], self.next_states[i, :m], m, bool(self.terminal[i])
        )

    def segments(self) -> list:
        return [self.segment(i) for i in range(len(self))]

    @classmethod
    def from_segments(cls, segments, n=None) -> "NStepBatch":
        n = n or max(s.effective_n for s in segments)
        b = len(segments)
        sd = len(segments[0].state)
        rewards = np.zeros((b, n))
        nxt = np.zeros((b, n, sd))
        for i, s in enumerate(segments):
            rewards[i, : s.effective_n] = s.rewards
            nxt[i, : s.effective_n] = s.next_states
        return cls(
            np.array([s.state for s in segments], dtype=np.float64),
            np.array([s.action for s in segments], dtype=np.float64),
            rewards,
            nxt,
            np.array([s.effective_n for s in segments], dtype=np.int64),
            np.array([s.terminal for s in segments], dtype=bool),
        )


@dataclass
class CapacityAdjustment:
    step: int
    size_before: int
    size_after: int
    dropped: int
    distance: float | None

    @property
    def action(self) -> str:
        if self.dropped:
            return "drop"
        return "check" if self.distance is not None else "skip"


class DynamicBuffer:
    """Insertion-ordered ring of transitions whose capacity floats in ``[min_capacity, max_capacity]``.

    Pushing beyond ``max_capacity`` overwrites the oldest transition. Every
    ``check_interval`` steps :meth:`adjust_capacity` measures how far the
    current policy has drifted from the oldest stored actions and discards a
    ``shrink_ratio`` fraction of the oldest data when the gap exceeds
    ``distance_threshold``.
    """

    def __init__(
        self,
        state_dim,
        action_dim,
        min_capacity=100_000,
        max_capacity=1_000_000,
        distance_threshold=0.2,
        shrink_ratio=0.2,
        check_interval=10_000,
        distance_batch=2048,
    ):
        if not 0 < min_capacity <= max_capacity:
            raise ValueError(f"need 0 < min_capacity <= max_capacity, got {min_capacity}, {max_capacity}")
        if not 0.0 < shrink_ratio < 1.0:
            raise ValueError(f"shrink_ratio {shrink_ratio} outside (0, 1)")
        if check_interval < 1 or distance_batch < 1:
            raise ValueError("check_interval and distance_batch must be positive")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.min_capacity = int(min_capacity)
        self.max_capacity = int(max_capacity)
        self.distance_threshold = float(distance_threshold)
        self.shrink_ratio = float(shrink_ratio)
        self.check_interval = int(check_interval)
        self.distance_batch = int(distance_batch)

        cap = self.max_capacity
        self._states = np.zeros((cap, state_dim))
        self._actions = np.zeros((cap, action_dim))
        self._rewards = np.zeros(cap)
        self._next_states = np.zeros((cap, state_dim))
        self._dones = np.zeros(cap, dtype=bool)
        self._episodes = np.zeros(cap, dtype=np.int64)
        self._episode_steps = np.zeros(cap, dtype=np.int64)
        self._head = 0  # physical index of the oldest transition
        self.size = 0
        self.total_dropped = 0
        self.total_evicted = 0

    def __len__(self) -> int:
        return self.size

    def _phys(self, logical):
        return (self._head + logical) % self.max_capacity

    def push(self, state, action, reward, next_state, done, episode_id, step_in_episode=0) -> None:
        if self.size == self.max_capacity:
            self._head = (self._head + 1) % self.max_capacity
            self.size -= 1
            self.total_evicted += 1
        i = self._phys(self.size)
        self._states[i] = state
        self._actions[i] = action
        self._rewards[i] = reward
        self._next_states[i] = next_state
        self._dones[i] = done
        self._episodes[i] = episode_id
        self._episode_steps[i] = step_in_episode
        self.size += 1

    def add(self, t: Transition) -> None:
        self.push(t.state, t.action, t.reward, t.next_state, t.done, t.episode_id, t.step_in_episode)

    def transition(self, logical: int) -> Transition:
        if not 0 <= logical < self.size:
            raise IndexError(logical)
        i = self._phys(logical)
        return Transition(
            self._states[i].copy(),
            self._actions[i].copy(),
            float(self._rewards[i]),
            self._next_states[i].copy(),
            bool(self._dones[i]),
            int(self._episodes[i]),
            int(self._episode_steps[i]),
        )

    def transitions(self) -> list:
        """All stored transitions, oldest first."""
        return [self.transition(i) for i in range(self.size)]

    def drop_oldest(self, count: int) -> int:
        count = max(0, min(int(count), self.size))
        self._head = (self._head + count) % self.max_capacity
        self.size -= count
        self.total_dropped += count
        return count

    def segments_at(self, starts, n: int) -> NStepBatch:
        """Build n-step segments beginning at the given logical indices."""
        starts = np.asarray(starts, dtype=np.int64)
        b = len(starts)
        rewards = np.zeros((b, n))
        next_states = np.zeros((b, n, self.state_dim))
        eff = np.zeros(b, dtype=np.int64)
        terminal = np.zeros(b, dtype=bool)
        alive = np.ones(b, dtype=bool)
        first = self._phys(starts)
        episode = self._episodes[first]
        for k in range(n):
            logical = starts + k
            if k > 0:
                alive &= logical < self.size
                phys = self._phys(np.minimum(logical, self.size - 1))
                alive &= self._episodes[phys] == episode
            else:
                phys = first
            rows = np.flatnonzero(alive)
            if rows.size == 0:
                break
            p = phys[rows]
            rewards[rows, k] = self._rewards[p]
            next_states[rows, k] = self._next_states[p]
            eff[rows] = k + 1
            ended = self._dones[p]
            terminal[rows[ended]] = True
            alive[rows[ended]] = False
        return NStepBatch(self._states[first], self._actions[first], rewards, next_states, eff, terminal)

    def sample_nstep(self, batch_size: int, n: int, rng) -> NStepBatch:
        """Uniformly sample (with replacement) ``batch_size`` segments of up to ``n`` steps."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if n < 1:
            raise ValueError("n must be >= 1")
        return self.segments_at(rng.integers(0, self.size, size=batch_size), n)

    def oldest(self, count: int) -> tuple:
        phys = self._phys(np.arange(count))
        return self._states[phys], self._actions[phys]

    def policy_distance(self, policy, distance_batch=None) -> float:
        """Mean Euclidean gap between ``policy(states)`` and stored actions on the oldest batch."""
        count = self.distance_batch if distance_batch is None else int(distance_batch)
        if count < 1 or self.size < count:
            raise ValueError(f"need {count} stored transitions for the policy distance, have {self.size}")
        states, actions = self.oldest(count)
        predicted = np.asarray(policy(states), dtype=np.float64).reshape(actions.shape)
        return float(np.mean(np.linalg.norm(predicted - actions, axis=1)))

    def adjust_capacity(self, policy, global_step: int) -> CapacityAdjustment:
        if global_step % self.check_interval:
            raise ValueError(f"step {global_step} is not a multiple of check_interval {self.check_interval}")
        before = self.size
        if not self.min_capacity < before < self.max_capacity:
            return CapacityAdjustment(global_step, before, before, 0, None)
        distance = self.policy_distance(policy, min(self.distance_batch, before))
        dropped = 0
        if distance > self.distance_threshold:
            count = min(math.floor(self.shrink_ratio * before), before - self.min_capacity)
            dropped = self.drop_oldest(count)
        return CapacityAdjustment(global_step, before, self.size, dropped, distance)
