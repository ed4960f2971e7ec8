"""Training loop, evaluation, metrics and run artifacts."""
from __future__ import annotations

import csv
import ctypes
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..agent import Agent, check_numeric
from ..envs import Env, make_env
from ..errors import ContractError, NumericError
from ..experience import ReplayBuffer, TrajectoryWriter, Transition
from .config import RunConfig

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("loss_model", "loss_policy", "loss_classifier", "loss_q", "loss_reward",
                "kl", "intrinsic", "classifier_acc", "q_mean")
GRAD_COLUMNS = tuple(f"grad_norm_{n}" for n in Agent.NETS)
METRIC_COLUMNS = ("env_step", "episode_return", "eval_return_mean", "eval_return_std",
                  "update_rounds") + LOSS_COLUMNS + GRAD_COLUMNS
TIMING_COLUMNS = ("env_step", "wall_clock_s")


def tune_allocator() -> None:
    """Keep freed numpy temporaries in the heap instead of returning them to the OS.

    Without this, every few-hundred-kilobyte temporary is a fresh mmap and page
    faults dominate the update step. Only affects glibc; a no-op elsewhere.
    """
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return
    M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
    libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
    libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)


def eval_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, 0xE7A1, episode]).generate_state(1)[0])


def env_from_config(cfg: RunConfig, seed: int | None) -> Env:
    return make_env(cfg.env.name, seed=seed, noise_std=cfg.env.noise_std,
                    tabular_path=cfg.env.tabular_path or None)


def run_episode(agent: Agent, env: Env, seed: int, explore: bool = False, step: int = 0) -> float:
    obs = env.reset(seed=seed)
    total = 0.0
    while True:
        a = agent.act(obs, step, explore=explore)
        obs, r, terminal, timeout = env.step(agent.to_env_action(a))
        total += r
        if terminal or timeout:
            return total


def evaluate(agent: Agent, env: Env, episodes: int, seed: int) -> tuple[float, float]:
    """Mean and std of undiscounted returns of the noise-free policy."""
    if episodes < 1:
        raise ContractError(f"episodes must be >= 1, got {episodes}")
    if env.spec.obs_dim != agent.spec.obs_dim or env.spec.act_dim != agent.spec.act_dim:
        raise ContractError("environment does not match the agent's observation/action spec")
    returns = [run_episode(agent, env, eval_seed(seed, i)) for i in range(episodes)]
    return float(np.mean(returns)), float(np.std(returns))


def random_baseline(env: Env, episodes: int, seed: int) -> tuple[float, float, list[float]]:
    """Returns of uniformly random actions, one fresh env seed per episode."""
    rng = np.random.default_rng(seed)
    lo, hi, dim = env.spec.act_low, env.spec.act_high, env.spec.act_dim
    returns = []
    for i in range(episodes):
        env.reset(seed=eval_seed(seed, i))
        total = 0.0
        while True:
            _, r, terminal, timeout = env.step(rng.uniform(lo, hi, dim))
            total += r
            if terminal or timeout:
                break
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns)), returns


@dataclass
class TrainResult:
    agent: Agent
    metrics_path: Path
    checkpoint_path: Path
    rows: list[dict]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _Writer:
    def __init__(self, path: Path, columns):
        self.columns = columns
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(columns)

    def row(self, values: dict) -> None:
        self.w.writerow([_fmt(values.get(c, "")) for c in self.columns])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def train(cfg: RunConfig, progress: bool = False) -> TrainResult:
    """Collect experience and update the agent; see README for the file layout."""
    cfg.validate()
    r = cfg.run
    out = Path(r.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.dumps())

    env = env_from_config(cfg, r.seed)
    eval_env = env_from_config(cfg, r.seed + 1)
    agent = Agent(env.spec, cfg.agent, seed=r.seed)
    buffer = ReplayBuffer(cfg.agent.buffer_size, env.spec.obs_dim, env.spec.act_dim)
    warmup_rng = np.random.default_rng(np.random.SeedSequence([r.seed, 0xAC7]))
    extra = {"env": {"name": cfg.env.name, "noise_std": cfg.env.noise_std,
                     "tabular_path": cfg.env.tabular_path}, "seed": r.seed}

    metrics = _Writer(out / "metrics.csv", METRIC_COLUMNS)
    timing = _Writer(out / "timing.csv", TIMING_COLUMNS)
    traj_fh = open(r.trajectory_path, "w") if r.trajectory_path else None
    traj = TrajectoryWriter(traj_fh) if traj_fh else None

    rows: list[dict] = []
    pending: list[dict] = []
    last_return = float("nan")
    episode, ep_step, ep_return = 0, 0, 0.0
    obs = env.reset()
    start = time.perf_counter()
    step = 0
    try:
        for step in range(r.total_env_steps):
            if step < r.warmup_steps:
                a = warmup_rng.uniform(-1.0, 1.0, env.spec.act_dim)
            else:
                a = agent.act(obs, step, explore=True)
            obs2, rew, terminal, timeout = env.step(agent.to_env_action(a))
            t = Transition(obs, a, rew, obs2, terminal, timeout)
            buffer.push(t)
            if traj:
                traj.write(episode, ep_step, t)
            ep_return += rew
            ep_step += 1
            if terminal or timeout:
                last_return = ep_return
                episode, ep_step, ep_return = episode + 1, 0, 0.0
                buffer.end_episode()
                obs = env.reset()
            else:
                obs = obs2

            if step >= r.warmup_steps:
                for _ in range(cfg.agent.utd):
                    batch = buffer.sample_sequences(cfg.agent.batch, cfg.agent.K, agent.rng)
                    info = agent.update_round(batch, step)
                    check_numeric(info)
                    pending.append(info)

            done = step + 1 == r.total_env_steps
            if (step + 1) % r.eval_every == 0 or done:
                mean, std = evaluate(agent, eval_env, r.eval_episodes, r.seed)
                row = {"env_step": step + 1, "episode_return": last_return,
                       "eval_return_mean": mean, "eval_return_std": std,
                       "update_rounds": agent.update_rounds}
                for col in LOSS_COLUMNS + GRAD_COLUMNS:
                    vals = [p[col] for p in pending if col in p]
                    row[col] = float(np.mean(vals)) if vals else float("nan")
                pending.clear()
                metrics.row(row)
                rows.append(row)
                elapsed = time.perf_counter() - start
                timing.row({"env_step": step + 1, "wall_clock_s": round(elapsed, 3)})
                if progress:
                    log.info("step %d eval %.1f +- %.1f (%.0fs)", step + 1, mean, std, elapsed)
            if r.checkpoint_every and (step + 1) % r.checkpoint_every == 0 and not done:
                agent.save(out / f"checkpoint_{step + 1}.npz", step + 1, extra)
    except NumericError as exc:
        agent.save(out / "diagnostic.npz", step, {**extra, "error": str(exc)})
        raise
    finally:
        metrics.close()
        timing.close()
        if traj_fh:
            traj_fh.close()
    ckpt = out / "checkpoint.npz"
    agent.save(ckpt, r.total_env_steps, extra)
    return TrainResult(agent, out / "metrics.csv", ckpt, rows)


def load_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k, v in row.items():
            row[k] = float(v) if v not in ("", None) else float("nan")
    return rows


def env_for_checkpoint(meta: dict, seed: int | None) -> Env:
    e = meta.get("extra", {}).get("env")
    if not e:
        raise ContractError("checkpoint does not record its environment")
    return make_env(e["name"], seed=seed, noise_std=e.get("noise_std", 0.0),
                    tabular_path=e.get("tabular_path") or None)


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
