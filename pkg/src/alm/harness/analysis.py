"""Value-bias measurement and open-loop latent divergence."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..agent import Agent, AgentConfig
from ..diffmath import Tensor
from ..envs import Env, TabularEnv
from ..errors import ContractError
from ..oracle import TabularMDP, state_policy_q
from .train import eval_seed


@dataclass
class BiasReport:
    mean: float
    std: float
    count: int
    divisor: float
    estimates: np.ndarray
    mc_returns: np.ndarray

    def as_dict(self) -> dict:
        return {"mean_normalized_bias": self.mean, "std_normalized_bias": self.std,
                "count": self.count, "divisor": self.divisor}


def _mc_return(agent: Agent, env: Env, first_action: np.ndarray, gamma: float) -> float:
    """Discounted return of taking ``first_action`` then following the greedy policy
    for one full horizon counted from the current state."""
    env.t = 0
    total, disc = 0.0, 1.0
    obs, r, terminal, timeout = env.step(agent.to_env_action(first_action))
    while True:
        total += disc * r
        disc *= gamma
        if terminal or timeout:
            return total
        obs, r, terminal, timeout = env.step(agent.to_env_action(agent.act(obs, 0, explore=False)))


def sample_states(agent: Agent, env: Env, n_states: int, seed: int) -> list[tuple[Env, np.ndarray]]:
    """Snapshots (env copy, observation) drawn uniformly over time from greedy-policy episodes."""
    rng = np.random.default_rng(seed)
    per_episode = 8
    out: list[tuple[Env, np.ndarray]] = []
    episode = 0
    while len(out) < n_states:
        take = min(per_episode, n_states - len(out))
        times = set(rng.choice(env.spec.horizon, size=take, replace=False).tolist())
        obs = env.reset(seed=eval_seed(seed, 10_000 + episode))
        for t in range(env.spec.horizon):
            if t in times:
                out.append((copy.deepcopy(env), obs.copy()))
            obs, _, terminal, timeout = env.step(agent.to_env_action(agent.act(obs, 0, explore=False)))
            if terminal or timeout:
                break
        episode += 1
    return out


def imagined_value(agent: Agent, obs: np.ndarray, action: np.ndarray, K: int,
                   rng: np.random.Generator) -> float:
    """Lambda-weighted imagined return from (obs, action), noise-free policy, no gradient."""
    z, _ = agent.encode(obs, use_target=True, sample=True, rng=rng)
    ro = agent.rollout(Tensor(z.data[None]), K, sigma=0.0, rng=rng,
                       first_action=Tensor(np.asarray(action, dtype=np.float64)[None]))
    return float(agent.rollout_value(ro).data[0])


def bias_analysis(agent: Agent, env: Env, n_states: int = 128, mc_episodes: int = 5,
                  seed: int = 0, K: int | None = None) -> BiasReport:
    """Normalized bias (estimate - MC return) / |mean MC return| over sampled states."""
    if mc_episodes < 2:
        raise ContractError(f"mc_episodes must be >= 2, got {mc_episodes}")
    if n_states < 30:
        raise ContractError(f"n_states must be >= 30 for a meaningful spread, got {n_states}")
    K = agent.cfg.K if K is None else K
    gamma = agent.cfg.gamma
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB1A5]))
    estimates, mc = [], []
    for i, (snap, obs) in enumerate(sample_states(agent, env, n_states, seed)):
        a = agent.act(obs, 0, explore=False)
        estimates.append(imagined_value(agent, obs, a, K, rng))
        returns = []
        for j in range(mc_episodes):
            rollout_env = copy.deepcopy(snap)
            rollout_env.rng = np.random.default_rng(eval_seed(seed, 100_000 + i * mc_episodes + j))
            returns.append(_mc_return(agent, rollout_env, a, gamma))
        mc.append(np.mean(returns))
    estimates, mc = np.array(estimates), np.array(mc)
    divisor = abs(float(mc.mean()))
    if divisor == 0:
        raise ContractError("mean Monte-Carlo return is zero; normalized bias undefined")
    nb = (estimates - mc) / divisor
    return BiasReport(float(nb.mean()), float(nb.std()), int(nb.size), divisor, estimates, mc)


def latent_divergence(agent: Agent, env: Env, horizon: int, seed: int = 0) -> np.ndarray:
    """L2 distance between open-loop model latents and encoder latents, per step 0..horizon."""
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    obs = env.reset(seed=eval_seed(seed, 20_000))
    observations, actions = [obs], []
    for _ in range(horizon):
        a = agent.act(obs, 0, explore=False)
        obs, _, terminal, timeout = env.step(agent.to_env_action(a))
        observations.append(obs)
        actions.append(a)
        if terminal:
            break
    enc = agent.encoder_dist(np.array(observations), frozen=True).mean.data
    z = enc[:1]
    out = [0.0]
    for t, a in enumerate(actions):
        z = agent.model_dist(z, a[None], frozen=True).mean.data
        out.append(float(np.linalg.norm(z[0] - enc[t + 1])))
    return np.array(out)


# ------------------------------------------------- table-backed network stand-ins

class _Table:
    """Duck-typed stand-in for an MLP, with no trainable parameters."""

    params: list = []

    def named_arrays(self) -> dict:
        return {}


class OneHotEncoder(_Table):
    """Latent mean equals the one-hot observation; std sits at the floor."""

    def __init__(self, n_states: int):
        self.n = n_states

    def __call__(self, x, frozen=False):
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        return Tensor(np.concatenate([x, np.full_like(x, -50.0)], axis=-1))


class StateActionTable(_Table):
    """Looks up table[argmax z, nearest action bin]."""

    def __init__(self, table: np.ndarray, bins: np.ndarray):
        self.table = table
        self.bins = bins

    def __call__(self, inputs, frozen=False):
        z, a = inputs[0].data, inputs[1].data
        s = np.argmax(z, axis=-1)
        ai = np.argmin(np.abs(a[:, :1] - self.bins[None, :]), axis=-1)
        return Tensor(self.table[s, ai][:, None])


class GreedyTablePolicy(_Table):
    """Pre-squash output whose tanh lands on the chosen action bin."""

    def __init__(self, actions: np.ndarray, bins: np.ndarray):
        self.pre = np.arctanh(np.clip(bins[actions], -0.999, 0.999))

    def __call__(self, z, frozen=False):
        z = z.data if isinstance(z, Tensor) else np.asarray(z)
        return Tensor(self.pre[np.argmax(z, axis=-1)][:, None])


def oracle_agent(env: TabularEnv, actions: np.ndarray, gamma: float | None = None) -> Agent:
    """Agent on a tabular env whose value head holds the exact Q of a greedy state policy.

    ``actions[s]`` is the action index taken in state s. The value head stores
    the return-scale Q (exact normalised Q divided by 1 - gamma), the reward head
    the true reward table.
    """
    mdp: TabularMDP = env.mdp
    gamma = mdp.gamma if gamma is None else gamma
    S, A = mdp.n_states, mdp.n_actions
    cfg = AgentConfig.desk(latent_dim=S, gamma=gamma, c=0.0, K=1, hidden=8, model_hidden=8)
    agent = Agent(env.spec, cfg, seed=0)
    pi_bar = np.zeros((S, A))
    pi_bar[np.arange(S), actions] = 1.0
    q = state_policy_q(mdp, pi_bar) / (1.0 - mdp.gamma)
    agent.encoder = agent.encoder_targ = OneHotEncoder(S)
    agent.policy = GreedyTablePolicy(np.asarray(actions), env.bins)
    agent.critic = agent.critic_targ = StateActionTable(q, env.bins)
    agent.reward = StateActionTable(mdp.r, env.bins)
    return agent
