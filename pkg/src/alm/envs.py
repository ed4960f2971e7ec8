"""Desk-scale environments: pendulum swing-up, a noisy 2-d point mass, and a
wrapper that exposes a tabular MDP through the continuous-action interface.

All environments share one small API::

    obs = env.reset()
    obs, reward, terminal, timeout = env.step(action)

and are pure functions of (seed, action sequence).
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import ContractError
from .experience import EnvSpec
from .oracle import TabularMDP


class Env:
    spec: EnvSpec

    def __init__(self, seed: int | None = None):
        self.rng = np.random.default_rng(seed)
        self.t = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        return self._reset()

    def step(self, action) -> tuple[np.ndarray, float, bool, bool]:
        a = np.asarray(action, dtype=np.float64).reshape(self.spec.act_dim)
        a = np.clip(a, self.spec.act_low, self.spec.act_high)
        obs, reward, terminal = self._step(a)
        self.t += 1
        timeout = (not terminal) and self.t >= self.spec.horizon
        return obs, float(reward), bool(terminal), bool(timeout)

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, a: np.ndarray) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


def _wrap_angle(x: float) -> float:
    return ((x + math.pi) % (2.0 * math.pi)) - math.pi


class Pendulum(Env):
    """Torque-limited swing-up; the pole starts hanging near the bottom."""

    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0
    DT = 0.05
    G = 10.0
    MASS = 1.0
    LENGTH = 1.0

    spec = EnvSpec(obs_dim=3, act_dim=1, act_low=-2.0, act_high=2.0, horizon=200,
                   reward_range=(-(math.pi ** 2 + 0.1 * 64.0 + 0.001 * 4.0), 0.0))

    def _reset(self) -> np.ndarray:
        self.theta = math.pi + self.rng.uniform(-0.1, 0.1)
        self.theta_dot = self.rng.uniform(-0.1, 0.1)
        return self._obs()

    def _obs(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def _step(self, a):
        u = float(a[0])
        th, thdot = self.theta, self.theta_dot
        cost = _wrap_angle(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        thdot = thdot + (3.0 * self.G / (2.0 * self.LENGTH) * math.sin(th)
                         + 3.0 / (self.MASS * self.LENGTH ** 2) * u) * self.DT
        thdot = min(max(thdot, -self.MAX_SPEED), self.MAX_SPEED)
        self.theta = th + thdot * self.DT
        self.theta_dot = thdot
        return self._obs(), -cost, False

    def set_state(self, theta: float, theta_dot: float) -> np.ndarray:
        self.theta, self.theta_dot = float(theta), float(theta_dot)
        return self._obs()


class PointMass(Env):
    """Double integrator in the plane, steered towards the origin.

    ``noise_std`` adds Gaussian noise to every velocity update.
    """

    DT = 0.1
    DAMPING = 0.1
    BOUND = 2.0

    spec = EnvSpec(obs_dim=4, act_dim=2, act_low=-1.0, act_high=1.0, horizon=200,
                   reward_range=(-2.0 * math.sqrt(2.0) * 2.0, 0.0))

    def __init__(self, seed: int | None = None, noise_std: float = 0.0):
        if noise_std < 0:
            raise ContractError(f"noise_std must be >= 0, got {noise_std}")
        super().__init__(seed)
        self.noise_std = float(noise_std)
        self.goal = np.zeros(2)

    def _reset(self):
        self.pos = self.rng.uniform(-1.0, 1.0, size=2)
        self.vel = np.zeros(2)
        return self._obs()

    def _obs(self):
        return np.concatenate([self.pos, self.vel])

    def _step(self, a):
        reward = -float(np.linalg.norm(self.pos - self.goal))
        vel = self.vel + self.DT * (a - self.DAMPING * self.vel)
        if self.noise_std > 0:
            vel = vel + self.noise_std * self.rng.standard_normal(2)
        self.vel = vel
        self.pos = np.clip(self.pos + self.DT * self.vel, -self.BOUND, self.BOUND)
        return self._obs(), reward, False

    def set_state(self, pos, vel) -> np.ndarray:
        self.pos = np.asarray(pos, dtype=np.float64).copy()
        self.vel = np.asarray(vel, dtype=np.float64).copy()
        return self._obs()


class TabularEnv(Env):
    """One-hot observations; the scalar action in [-1, 1] picks the nearest of
    |A| evenly spaced bins."""

    def __init__(self, mdp: TabularMDP, seed: int | None = None, horizon: int = 200):
        super().__init__(seed)
        self.mdp = mdp
        S, A = mdp.n_states, mdp.n_actions
        self.bins = np.linspace(-1.0, 1.0, A) if A > 1 else np.zeros(1)
        self.spec = EnvSpec(obs_dim=S, act_dim=1, act_low=-1.0, act_high=1.0, horizon=horizon,
                            reward_range=(float(mdp.r.min()), float(mdp.r.max())))

    def action_index(self, action) -> int:
        return int(np.argmin(np.abs(self.bins - float(np.asarray(action).reshape(-1)[0]))))

    def action_value(self, index: int) -> np.ndarray:
        return np.array([self.bins[index]])

    def one_hot(self, s: int) -> np.ndarray:
        v = np.zeros(self.mdp.n_states)
        v[s] = 1.0
        return v

    def _reset(self):
        self.state = int(self.rng.choice(self.mdp.n_states, p=self.mdp.p0))
        return self.one_hot(self.state)

    def _step(self, a):
        ai = self.action_index(a)
        reward = self.mdp.r[self.state, ai]
        self.state = int(self.rng.choice(self.mdp.n_states, p=self.mdp.P[self.state, ai]))
        return self.one_hot(self.state), reward, False

    def set_state(self, s: int) -> np.ndarray:
        self.state = int(s)
        return self.one_hot(self.state)


def pendulum_env(seed: int | None = None) -> Pendulum:
    return Pendulum(seed)


def pointmass_env(seed: int | None = None, noise_std: float = 0.0) -> PointMass:
    return PointMass(seed, noise_std)


def tabular_env(mdp: TabularMDP, seed: int | None = None, horizon: int = 200) -> TabularEnv:
    return TabularEnv(mdp, seed, horizon)


def load_tabular_mdp(path: str) -> TabularMDP:
    """Read an MDP from an ``.npz`` holding p0, P, r and gamma."""
    with np.load(path) as f:
        return TabularMDP(p0=f["p0"], P=f["P"], r=f["r"], gamma=float(f["gamma"]))


ENV_NAMES = ("pendulum", "pointmass", "tabular")


def make_env(name: str, seed: int | None = None, noise_std: float = 0.0,
             tabular_path: str | None = None) -> Env:
    factories: dict[str, Callable[[], Env]] = {
        "pendulum": lambda: pendulum_env(seed),
        "pointmass": lambda: pointmass_env(seed, noise_std),
    }
    if name == "tabular":
        if not tabular_path:
            raise ContractError("env.tabular_path is required for the tabular environment")
        return tabular_env(load_tabular_mdp(tabular_path), seed)
    try:
        return factories[name]()
    except KeyError:
        raise ContractError(f"unknown environment {name!r}; choose from {ENV_NAMES}") from None
