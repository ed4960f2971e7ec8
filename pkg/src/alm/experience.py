"""Replay storage with contiguous K-step window sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .errors import ContractError, EmptyBufferError


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    act_low: float
    act_high: float
    horizon: int
    reward_range: tuple[float, float]

    def __post_init__(self):
        if not (np.isfinite(self.act_low) and np.isfinite(self.act_high)) or self.act_low >= self.act_high:
            raise ContractError(f"bad action bounds [{self.act_low}, {self.act_high}]")
        if self.horizon < 1:
            raise ContractError(f"horizon must be >= 1, got {self.horizon}")


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool = False
    timeout: bool = False

    def __post_init__(self):
        if self.terminal and self.timeout:
            raise ContractError("a transition cannot be both terminal and a timeout")


@dataclass
class SequenceBatch:
    """B windows of K consecutive transitions from one episode each.

    ``obs`` holds s_0..s_K, so it has one more step than the other arrays.
    """

    obs: np.ndarray       # [B, K+1, obs_dim]
    act: np.ndarray       # [B, K, act_dim]
    rew: np.ndarray       # [B, K]
    terminal: np.ndarray  # [B, K]
    timeout: np.ndarray   # [B, K]

    @property
    def batch_size(self) -> int:
        return self.obs.shape[0]

    @property
    def K(self) -> int:
        return self.act.shape[1]


class ReplayBuffer:
    """Fixed-capacity ring of transitions.

    Episode membership is inferred on push: a new episode starts after a
    terminal/timeout transition or whenever ``s`` does not continue the
    previous ``s_next``.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ContractError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.timeout = np.zeros(capacity, dtype=bool)
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.position = np.full(capacity, -1, dtype=np.int64)  # insertion counter
        self.total = 0
        self._episode = -1
        self._open = False  # previous transition left its episode running

    def __len__(self) -> int:
        return min(self.total, self.capacity)

    def push(self, t: Transition) -> None:
        s = np.asarray(t.s, dtype=np.float64)
        a = np.asarray(t.a, dtype=np.float64)
        s_next = np.asarray(t.s_next, dtype=np.float64)
        if s.shape != (self.obs_dim,) or s_next.shape != (self.obs_dim,):
            raise ContractError(f"observation shape {s.shape}/{s_next.shape}, expected ({self.obs_dim},)")
        if a.shape != (self.act_dim,):
            raise ContractError(f"action shape {a.shape}, expected ({self.act_dim},)")
        if self.total > 0:
            prev = (self.total - 1) % self.capacity
            continues = self._open and np.array_equal(self.next_obs[prev], s)
        else:
            continues = False
        if not continues:
            self._episode += 1
        j = self.total % self.capacity
        self.obs[j] = s
        self.next_obs[j] = s_next
        self.act[j] = a
        self.rew[j] = t.r
        self.terminal[j] = t.terminal
        self.timeout[j] = t.timeout
        self.episode[j] = self._episode
        self.position[j] = self.total
        self.total += 1
        self._open = not (t.terminal or t.timeout)

    def end_episode(self) -> None:
        """Force the next push to open a new episode."""
        self._open = False

    def valid_starts(self, K: int) -> np.ndarray:
        """Ring indices at which a K-window lies inside one stored episode."""
        if K < 1:
            raise ContractError(f"K must be >= 1, got {K}")
        n = len(self)
        if n < K:
            return np.empty(0, dtype=np.int64)
        starts = np.arange(n) if self.total <= self.capacity else np.arange(self.capacity)
        ends = (starts + K - 1) % self.capacity
        ok = (self.position[ends] == self.position[starts] + K - 1) & (
            self.episode[ends] == self.episode[starts])
        return starts[ok]

    def sample_sequences(self, batch: int, K: int, rng: np.random.Generator) -> SequenceBatch:
        starts = self.valid_starts(K)
        if starts.size == 0:
            raise EmptyBufferError(f"no valid window of length {K} among {len(self)} transitions")
        chosen = starts[rng.integers(0, starts.size, size=batch)]
        return self.gather(chosen, K)

    def gather(self, starts: np.ndarray, K: int) -> SequenceBatch:
        idx = (starts[:, None] + np.arange(K)[None, :]) % self.capacity
        obs = np.concatenate([self.obs[idx], self.next_obs[idx[:, -1:]]], axis=1)
        return SequenceBatch(obs=obs, act=self.act[idx], rew=self.rew[idx],
                             terminal=self.terminal[idx], timeout=self.timeout[idx])


class TrajectoryWriter:
    """Line-delimited JSON, one record per transition."""

    FIELDS = ("episode", "step", "s", "a", "r", "terminal", "timeout")

    def __init__(self, stream: TextIO):
        self.stream = stream

    def write(self, episode: int, step: int, t: Transition) -> None:
        rec = {
            "episode": int(episode), "step": int(step),
            "s": np.asarray(t.s, dtype=float).tolist(),
            "a": np.asarray(t.a, dtype=float).tolist(),
            "r": float(t.r), "terminal": bool(t.terminal), "timeout": bool(t.timeout),
        }
        self.stream.write(json.dumps(rec) + "\n")


def read_trajectories(path: str | Path) -> Iterable[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
