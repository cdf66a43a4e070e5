"""Built-in continuous-control tasks.

Both tasks are small analytic systems integrated with semi-implicit Euler.
``step`` returns ``(obs, reward, done, truncated)``: ``done`` marks genuine
termination, ``truncated`` the time limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    max_episode_steps: int

    def __post_init__(self):
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must have one entry per action dimension")
        for lo, hi in zip(self.action_low, self.action_high):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bad action bounds ({lo}, {hi})")

    def scale_action(self, unit_action) -> np.ndarray:
        """Map an action from [-1, 1]^d onto the task's box."""
        lo = np.asarray(self.action_low)
        hi = np.asarray(self.action_high)
        u = np.clip(np.asarray(unit_action, dtype=np.float64), -1.0, 1.0)
        return lo + (u + 1.0) * 0.5 * (hi - lo)


def wrap_angle(x: float) -> float:
    return ((x + math.pi) % (2.0 * math.pi)) - math.pi


class Env:
    spec: EnvSpec

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.steps = 0

    def reset(self, rng=None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> tuple:
        raise NotImplementedError


class Pendulum(Env):
    """Torque-limited pendulum swing-up; angle 0 is upright."""

    spec = EnvSpec(3, 1, (-2.0,), (2.0,), 200)
    g = 10.0
    m = 1.0
    l = 1.0
    dt = 0.05
    max_speed = 8.0
    max_torque = 2.0

    def __init__(self, seed=None):
        super().__init__(seed)
        self.theta = 0.0
        self.theta_dot = 0.0

    def set_state(self, theta, theta_dot) -> np.ndarray:
        self.theta = float(theta)
        self.theta_dot = float(theta_dot)
        self.steps = 0
        return self.observation()

    def reset(self, rng=None) -> np.ndarray:
        rng = self.rng if rng is None else rng
        theta = rng.uniform(-math.pi, math.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return self.set_state(theta, theta_dot)

    def observation(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def step(self, action) -> tuple:
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -self.max_torque, self.max_torque))
        th, thdot = self.theta, self.theta_dot
        reward = -(wrap_angle(th) ** 2 + 0.1 * thdot**2 + 0.001 * u**2)
        accel = 3.0 * self.g / (2.0 * self.l) * math.sin(th) + 3.0 * u / (self.m * self.l**2)
        thdot = min(max(thdot + accel * self.dt, -self.max_speed), self.max_speed)
        self.theta = th + thdot * self.dt
        self.theta_dot = thdot
        self.steps += 1
        return self.observation(), reward, False, self.steps >= self.spec.max_episode_steps

    def energy(self) -> float:
        """Energy per unit inertia for the undriven system."""
        return 0.5 * self.theta_dot**2 + 3.0 * self.g / (2.0 * self.l) * math.cos(self.theta)


class PointMass(Env):
    """2-D double integrator steered to the origin."""

    spec = EnvSpec(4, 2, (-1.0, -1.0), (1.0, 1.0), 200)
    dt = 0.05
    goal_radius = 0.05
    pos_limit = 2.0
    vel_limit = 2.0

    def __init__(self, seed=None):
        super().__init__(seed)
        self.goal = np.zeros(2)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def set_state(self, pos, vel) -> np.ndarray:
        self.pos = np.array(pos, dtype=np.float64)
        self.vel = np.array(vel, dtype=np.float64)
        self.steps = 0
        return self.observation()

    def reset(self, rng=None) -> np.ndarray:
        rng = self.rng if rng is None else rng
        return self.set_state(rng.uniform(-1.0, 1.0, size=2), np.zeros(2))

    def observation(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def step(self, action) -> tuple:
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1), -1.0, 1.0)
        self.vel = np.clip(self.vel + a * self.dt, -self.vel_limit, self.vel_limit)
        self.pos = np.clip(self.pos + self.vel * self.dt, -self.pos_limit, self.pos_limit)
        self.steps += 1
        dist = float(np.linalg.norm(self.pos - self.goal))
        reward = -dist - 0.01 * float(a @ a)
        done = dist < self.goal_radius
        return self.observation(), reward, done, (not done) and self.steps >= self.spec.max_episode_steps


class ConstantReward(Env):
    """Single-state task paying a fixed reward; used for loop and evaluation checks."""

    def __init__(self, seed=None, reward=1.0, episode_steps=200, state_dim=1, action_dim=1):
        super().__init__(seed)
        self.spec = EnvSpec(state_dim, action_dim, (-1.0,) * action_dim, (1.0,) * action_dim, episode_steps)
        self.reward = float(reward)

    def reset(self, rng=None) -> np.ndarray:
        self.steps = 0
        return np.zeros(self.spec.state_dim)

    def step(self, action) -> tuple:
        self.steps += 1
        return np.zeros(self.spec.state_dim), self.reward, False, self.steps >= self.spec.max_episode_steps


REGISTRY = {
    "pendulum": Pendulum,
    "pointmass": PointMass,
    "constant": ConstantReward,
}


def make_env(name: str, seed=None) -> Env:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; registered: {', '.join(sorted(REGISTRY))}") from None
    return cls(seed)
