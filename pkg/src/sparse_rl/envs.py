"""Built-in continuous-control tasks with closed-form, deterministic dynamics.

Three desk-scale tasks behind one interface:

* ``pendulum``  - torque-limited swing-up (obs 3, act 1), semi-implicit Euler,
                  dt 0.05, quadratic cost, 200-step episodes.
* ``reacher2d`` - 2-D point mass driven toward a per-episode target
                  (obs 6, act 2), dt 0.1, 150-step episodes.
* ``lqr``       - discrete linear-quadratic regulator (obs 2, act 1) with the
                  known optimal gain exposed for sanity checks, 100 steps.

All actions live in [-1, 1]^k and are clipped on entry. Dynamics are pure:
(state, action) fully determines the next state; randomness enters only
through ``reset(seed)``. Episodes end by truncation at ``max_episode_steps``;
none of the tasks has an absorbing terminal state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EnvError(RuntimeError):
    """Stepping a finished episode, or other protocol misuse."""


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    max_episode_steps: int
    reward_range: tuple[float, float]


class Env:
    spec: EnvSpec

    def reset(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        raise NotImplementedError

    def _clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.spec.action_dim,):
            raise EnvError(f"expected action of dim {self.spec.action_dim}, got shape {a.shape}")
        return np.clip(a, -1.0, 1.0)


def _angle_normalize(x: float) -> float:
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class PendulumEnv(Env):
    """Torque-limited swing-up of a gravity-loaded rod, upright at theta=0.

    theta'' = 3g/(2l) sin(theta) + 3u/(m l^2), integrated semi-implicitly:
    the velocity updates from the current angle, then the angle from the new
    velocity. Cost is theta^2 + 0.1 theta_dot^2 + 0.001 u^2, so reward peaks
    at 0 when resting upright with no torque.
    """

    gravity = 10.0
    mass = 1.0
    length = 1.0
    dt = 0.05
    max_speed = 8.0
    max_torque = 2.0

    def __init__(self):
        self.spec = EnvSpec(
            obs_dim=3,
            action_dim=1,
            max_episode_steps=200,
            reward_range=(-(np.pi**2 + 0.1 * self.max_speed**2 + 0.001 * self.max_torque**2), 0.0),
        )
        self.state = np.zeros(2)
        self._steps = 0
        self._done = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.state = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])
        self._steps = 0
        self._done = False
        return self._obs()

    def _obs(self) -> np.ndarray:
        theta, theta_dot = self.state
        return np.array([np.cos(theta), np.sin(theta), theta_dot])

    def energy(self) -> float:
        """Total mechanical energy of the free pendulum (u = 0)."""
        theta, theta_dot = self.state
        inertia = self.mass * self.length**2 / 3.0
        return 0.5 * inertia * theta_dot**2 + self.mass * self.gravity * (self.length / 2.0) * np.cos(theta)

    def step(self, action):
        if self._done:
            raise EnvError("episode finished; call reset")
        u = self.max_torque * self._clip_action(action)[0]
        theta, theta_dot = self.state
        cost = _angle_normalize(theta) ** 2 + 0.1 * theta_dot**2 + 0.001 * u**2
        accel = (3.0 * self.gravity / (2.0 * self.length)) * np.sin(theta)
        accel += 3.0 / (self.mass * self.length**2) * u
        theta_dot = np.clip(theta_dot + accel * self.dt, -self.max_speed, self.max_speed)
        theta = theta + theta_dot * self.dt
        self.state = np.array([theta, theta_dot])
        self._steps += 1
        truncated = self._steps >= self.spec.max_episode_steps
        self._done = truncated
        return self._obs(), -float(cost), False, truncated


class Reacher2DEnv(Env):
    """Point mass on the [-1, 1]^2 plane accelerating toward a sampled target.

    Velocity decays by a drag factor each step; position is clamped to the
    box with the offending velocity component zeroed. Reward is the negative
    distance to the target minus a small action penalty.
    """

    dt = 0.1
    accel = 2.0
    drag = 0.05

    def __init__(self):
        self.spec = EnvSpec(
            obs_dim=6,
            action_dim=2,
            max_episode_steps=150,
            reward_range=(-(2 * np.sqrt(2.0) + 0.01 * 2.0), 0.0),
        )
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.target = np.zeros(2)
        self._steps = 0
        self._done = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.pos = rng.uniform(-0.8, 0.8, size=2)
        self.vel = np.zeros(2)
        self.target = rng.uniform(-0.8, 0.8, size=2)
        self._steps = 0
        self._done = False
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel, self.target - self.pos])

    def step(self, action):
        if self._done:
            raise EnvError("episode finished; call reset")
        a = self._clip_action(action)
        reward = -(np.linalg.norm(self.pos - self.target) + 0.01 * float(a @ a))
        self.vel = (1.0 - self.drag) * self.vel + self.accel * a * self.dt
        self.pos = self.pos + self.vel * self.dt
        for i in range(2):
            if abs(self.pos[i]) > 1.0:
                self.pos[i] = np.clip(self.pos[i], -1.0, 1.0)
                self.vel[i] = 0.0
        self._steps += 1
        truncated = self._steps >= self.spec.max_episode_steps
        self._done = truncated
        return self._obs(), float(reward), False, truncated


class LQREnv(Env):
    """Discrete double integrator with quadratic cost and known optimum.

    x' = A x + B u_scaled with cost x^T Q x + u^T R u. The optimal feedback
    gain solves the discrete algebraic Riccati equation by fixed-point
    iteration and is exposed for agent sanity checks. States are clamped to
    [-state_bound, state_bound]^2 so rewards stay within ``reward_range``.
    """

    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [0.1]])
    Q = np.eye(2)
    R = np.array([[0.1]])
    action_scale = 2.0
    state_bound = 10.0

    def __init__(self):
        lo = -(2 * self.state_bound**2 + float(self.R[0, 0]) * self.action_scale**2)
        self.spec = EnvSpec(obs_dim=2, action_dim=1, max_episode_steps=100, reward_range=(lo, 0.0))
        self.x = np.zeros(2)
        self._steps = 0
        self._done = True
        self._P = self._solve_riccati()
        self._K = np.linalg.solve(
            self.R + self.B.T @ self._P @ self.B, self.B.T @ self._P @ self.A
        )

    def _solve_riccati(self) -> np.ndarray:
        P = np.array(self.Q)
        for _ in range(10_000):
            gain = np.linalg.solve(self.R + self.B.T @ P @ self.B, self.B.T @ P @ self.A)
            nxt = self.Q + self.A.T @ P @ (self.A - self.B @ gain)
            if np.max(np.abs(nxt - P)) < 1e-12:
                return nxt
            P = nxt
        return P

    def optimal_gain(self) -> np.ndarray:
        return self._K.copy()

    def optimal_value(self, x) -> float:
        """Infinite-horizon cost from state x under the optimal unclipped policy."""
        x = np.asarray(x, dtype=np.float64)
        return float(x @ self._P @ x)

    def optimal_action(self, x) -> np.ndarray:
        u = -(self._K @ np.asarray(x, dtype=np.float64)) / self.action_scale
        return np.clip(u, -1.0, 1.0)

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.x = rng.uniform(-0.5, 0.5, size=2)
        self._steps = 0
        self._done = False
        return self.x.copy()

    def step(self, action):
        if self._done:
            raise EnvError("episode finished; call reset")
        u = self.action_scale * self._clip_action(action)
        cost = float(self.x @ self.Q @ self.x + u @ self.R @ u)
        self.x = self.A @ self.x + (self.B @ u).reshape(-1)
        self.x = np.clip(self.x, -self.state_bound, self.state_bound)
        self._steps += 1
        truncated = self._steps >= self.spec.max_episode_steps
        self._done = truncated
        return self.x.copy(), -cost, False, truncated


_REGISTRY = {
    "pendulum": PendulumEnv,
    "reacher2d": Reacher2DEnv,
    "lqr": LQREnv,
}


def env_ids() -> list[str]:
    return sorted(_REGISTRY)


def make_env(env_id: str) -> Env:
    try:
        return _REGISTRY[env_id]()
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; available: {env_ids()}") from None
