"""Encoder, latent model, policy and the three critics, trained jointly.

Actions inside the agent live in the normalised box [-1, 1]^act_dim; the
harness maps them to environment bounds with :meth:`Agent.to_env_action`.
Replay stores normalised actions.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import AdamState, Tape, Tensor
from .dists import (
    STD_FLOOR,
    DiagGaussian,
    bernoulli_cross_entropy,
    clamped_log_odds,
    gaussian_kl,
    gaussian_rsample,
    lambda_weights,
)
from .errors import ContractError, DomainError, NumericError
from .experience import EnvSpec, SequenceBatch
from .nets import MLP

CHECKPOINT_VERSION = 1


@dataclass
class AgentConfig:
    latent_dim: int = 50
    hidden: int = 512
    model_hidden: int = 1024
    depth: int = 2
    K: int = 3
    gamma: float = 0.99
    lam: float = 0.95
    c: float = 0.1
    tau: float = 0.005
    lr: float = 1e-4
    max_grad_norm: float = 100.0
    batch: int = 512
    utd: int = 3
    buffer_size: int = 100_000
    no_kl: bool = False
    no_value: bool = False
    no_classifier: bool = False
    modelfree_actor: bool = False
    sigma_start: float = 1.0
    sigma_end: float = 0.1
    decay_steps: int = 100_000
    noise_clip: float = 0.3
    log_reward_shift: float = 0.0  # 0 disables the a * log(1 + r / a) reward transform
    min_std: float = STD_FLOOR  # floor on encoder and model standard deviations
    debug: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ContractError(f"agent.K must be >= 1, got {self.K}")
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"agent.gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 <= self.lam < 1.0:
            raise ContractError(f"agent.lam must lie in [0, 1), got {self.lam}")
        if self.c < 0:
            raise ContractError(f"agent.c must be >= 0, got {self.c}")
        if self.sigma_end > self.sigma_start:
            raise ContractError("agent.sigma_end must not exceed agent.sigma_start")
        if self.min_std <= 0:
            raise ContractError(f"agent.min_std must be > 0, got {self.min_std}")
        if self.log_reward_shift < 0:
            raise ContractError("agent.log_reward_shift must be >= 0")
        for name in ("latent_dim", "hidden", "model_hidden", "depth", "batch", "utd",
                     "buffer_size", "decay_steps"):
            if getattr(self, name) < 1:
                raise ContractError(f"agent.{name} must be >= 1")

    @classmethod
    def full(cls, **kw) -> "AgentConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "AgentConfig":
        base = dict(latent_dim=16, hidden=128, model_hidden=128, batch=128,
                    buffer_size=50_000, decay_steps=20_000, min_std=0.1)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TargetLatents:
    """Target-encoder distributions and one sample for every s_0..s_K."""

    mean: np.ndarray    # [B, K+1, L]
    std: np.ndarray
    sample: np.ndarray


@dataclass
class ImaginedRollout:
    latents: list[Tensor]             # z_0..z_K
    actions: list[Tensor]             # a_0..a_K
    rewards: list[Tensor]             # predicted r(z_i, a_i), i < K
    intrinsic: list[Tensor]           # log-odds of the classifier, i < K
    values: list[Tensor]              # Q(z_k, a_k), k = 1..K
    gamma: float
    c: float
    extras: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.rewards)


def _flat(t: Tensor) -> Tensor:
    return dm.reshape(t, (t.shape[0],))


class Agent:
    NETS = ("encoder", "model", "policy", "reward", "critic", "classifier")

    def __init__(self, spec: EnvSpec, cfg: AgentConfig, seed: int = 0):
        self.spec = spec
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        init = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        L, A, H, D = cfg.latent_dim, spec.act_dim, cfg.hidden, cfg.depth
        self.encoder = MLP(spec.obs_dim, H, 2 * L, init, "encoder", depth=D)
        self.model = MLP(L + A, cfg.model_hidden, 2 * L, init, "model", depth=D)
        self.policy = MLP(L, H, A, init, "policy", depth=D, zero_last=True)
        self.reward = MLP(L + A, H, 1, init, "reward", depth=D, layer_norm=True, zero_last=True)
        self.critic = MLP(L + A, H, 1, init, "critic", depth=D, layer_norm=True, zero_last=True)
        self.classifier = MLP(2 * L + A, H, 1, init, "classifier", depth=D)
        self.encoder_targ = MLP(spec.obs_dim, H, 2 * L, init, "encoder_targ", depth=D)
        self.critic_targ = MLP(L + A, H, 1, init, "critic_targ", depth=D, layer_norm=True)
        self.encoder_targ.copy_from(self.encoder)
        self.critic_targ.copy_from(self.critic)
        self.optim = {n: AdamState.for_params(getattr(self, n).params, lr=cfg.lr) for n in self.NETS}
        self.update_rounds = 0

    # ------------------------------------------------------------ helpers

    def net(self, name: str) -> MLP:
        return getattr(self, name)

    def sigma(self, step: int) -> float:
        """Linear exploration schedule from sigma_start to sigma_end."""
        if step < 0:
            raise ContractError(f"step must be >= 0, got {step}")
        frac = min(step / self.cfg.decay_steps, 1.0)
        return self.cfg.sigma_start + frac * (self.cfg.sigma_end - self.cfg.sigma_start)

    def to_env_action(self, a: np.ndarray) -> np.ndarray:
        lo, hi = self.spec.act_low, self.spec.act_high
        return lo + (np.clip(a, -1.0, 1.0) + 1.0) * 0.5 * (hi - lo)

    def from_env_action(self, a: np.ndarray) -> np.ndarray:
        lo, hi = self.spec.act_low, self.spec.act_high
        return np.clip(2.0 * (np.asarray(a, dtype=np.float64) - lo) / (hi - lo) - 1.0, -1.0, 1.0)

    def transform_reward(self, r: np.ndarray) -> np.ndarray:
        a = self.cfg.log_reward_shift
        if a == 0:
            return r
        if np.any(r <= -a):
            raise DomainError(f"reward {np.min(r)} is below -log_reward_shift ({-a})")
        return a * np.log1p(r / a)

    def _split(self, out: Tensor) -> DiagGaussian:
        L = self.cfg.latent_dim
        return DiagGaussian.from_raw(dm.columns(out, 0, L), dm.columns(out, L, 2 * L), self.cfg.min_std)

    def encoder_dist(self, obs, use_target: bool = False, frozen: bool = False) -> DiagGaussian:
        net = self.encoder_targ if use_target else self.encoder
        return self._split(net(dm.as_tensor(obs), frozen=frozen or use_target))

    def model_dist(self, z, a, frozen: bool = False) -> DiagGaussian:
        return self._split(self.model([dm.as_tensor(z), dm.as_tensor(a)], frozen=frozen))

    def encode(self, obs, use_target: bool = False, sample: bool = False,
               rng: np.random.Generator | None = None) -> tuple[Tensor, DiagGaussian]:
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        if obs.shape[-1] != self.spec.obs_dim:
            raise ContractError(f"observation dim {obs.shape[-1]}, expected {self.spec.obs_dim}")
        x = obs[None] if single else obs
        dist = self.encoder_dist(x, use_target=use_target)
        z = dist.mean
        if sample:
            z = gaussian_rsample(dist, (rng or self.rng).standard_normal(dist.mean.shape))
        if single:
            z = Tensor(z.data[0])
        return z, dist

    def policy_mean(self, z, frozen: bool = False) -> Tensor:
        return dm.tanh(self.policy(dm.as_tensor(z), frozen=frozen))

    def _noise(self, rng, shape, sigma: float) -> np.ndarray:
        clip = self.cfg.noise_clip
        return np.clip(sigma * rng.standard_normal(shape), -clip, clip)

    def act(self, obs, step: int, explore: bool) -> np.ndarray:
        """Normalised action for one observation."""
        sigma = self.sigma(step)
        z, _ = self.encode(obs)
        mu = np.tanh(self.policy(Tensor(z.data[None])).data[0])
        if explore:
            mu = mu + self._noise(self.rng, mu.shape, sigma)
        return np.clip(mu, -1.0, 1.0)

    def target_latents(self, obs_seq: np.ndarray, rng: np.random.Generator | None = None) -> TargetLatents:
        """Encode [B, T, obs_dim] with the target encoder (no gradient)."""
        rng = rng or self.rng
        B, T, _ = obs_seq.shape
        dist = self.encoder_dist(Tensor(obs_seq.reshape(B * T, -1)), use_target=True)
        L = self.cfg.latent_dim
        mean = dist.mean.data.reshape(B, T, L)
        std = dist.std.data.reshape(B, T, L)
        return TargetLatents(mean, std, mean + std * rng.standard_normal(mean.shape))

    # ------------------------------------------------------- model / encoder

    def encoder_model_loss(self, batch: SequenceBatch, rng: np.random.Generator | None = None,
                           targ: TargetLatents | None = None) -> tuple[Tensor, dict]:
        """Negative K-step latent objective for the encoder and the model.

        Rewards and the terminal value come from frozen heads, and there is no
        discounting inside the window.
        """
        cfg = self.cfg
        if batch.K != cfg.K:
            raise ContractError(f"batch windows have K={batch.K}, agent expects K={cfg.K}")
        rng = rng or self.rng
        targ = targ if targ is not None else self.target_latents(batch.obs, rng)
        B, L = batch.batch_size, cfg.latent_dim
        dist0 = self.encoder_dist(Tensor(batch.obs[:, 0]))
        z = gaussian_rsample(dist0, rng.standard_normal((B, L)))
        objective = Tensor(np.zeros(B))
        kl_total = 0.0
        for i in range(cfg.K):
            a = Tensor(batch.act[:, i])
            objective = objective + _flat(self.reward([z, a], frozen=True))
            step = self.model_dist(z, a)
            if not cfg.no_kl:
                target = DiagGaussian(Tensor(targ.mean[:, i + 1]), Tensor(targ.std[:, i + 1]))
                kl = gaussian_kl(step, target)
                kl_total += float(kl.data.mean())
                objective = objective - kl
            z = gaussian_rsample(step, rng.standard_normal((B, L)))
        if not cfg.no_value:
            alive = 1.0 - batch.terminal[:, -1].astype(np.float64)
            q = _flat(self.critic([z, self.policy_mean(z, frozen=True)], frozen=True))
            objective = objective + q * alive
        loss = -dm.mean(objective)
        return loss, {"kl": kl_total / cfg.K}

    # ---------------------------------------------------------------- policy

    def rollout(self, z0, K: int, sigma: float, rng: np.random.Generator,
                first_action=None, c: float | None = None) -> ImaginedRollout:
        """Unroll the model for K steps with policy actions.

        Every head except the policy is evaluated with frozen weights, so a
        backward pass from the rollout reaches only the policy parameters
        (and whatever ``z0`` depends on).
        """
        cfg = self.cfg
        c = cfg.c if c is None else c
        z = dm.as_tensor(z0)
        B = z.shape[0]
        act_dim = self.spec.act_dim

        def action(zk):
            mu = self.policy_mean(zk)
            noise = self._noise(rng, (B, act_dim), sigma)
            return dm.clip_straight_through(mu + noise, -1.0, 1.0)

        a = action(z) if first_action is None else dm.as_tensor(first_action)
        out = ImaginedRollout([z], [a], [], [], [], cfg.gamma, c)
        for _ in range(K):
            out.rewards.append(_flat(self.reward([z, a], frozen=True)))
            step = self.model_dist(z, a, frozen=True)
            z_next = gaussian_rsample(step, rng.standard_normal(step.mean.shape))
            if c > 0:
                prob = dm.sigmoid(self.classifier([z_next, a, z], frozen=True))
                out.intrinsic.append(_flat(clamped_log_odds(prob)))
            else:
                out.intrinsic.append(Tensor(np.zeros(B)))
            z = z_next
            a = action(z)
            out.latents.append(z)
            out.actions.append(a)
            out.values.append(_flat(self.critic([z, a], frozen=True)))
        return out

    def rollout_value(self, ro: ImaginedRollout, lam: float | None = None) -> Tensor:
        """Lambda-weighted mix over k = 1..K of the k-step augmented return.

        With K = 0 the rollout holds no model step and the value is Q(z_0, a_0).
        """
        if ro.K == 0:
            return _flat(self.critic([ro.latents[0], ro.actions[0]], frozen=True))
        lam = self.cfg.lam if lam is None else lam
        w = lambda_weights(lam, ro.K)
        g = ro.gamma
        running = None
        total = None
        for i in range(ro.K):
            step = ro.rewards[i] + ro.intrinsic[i] * ro.c if ro.c > 0 else ro.rewards[i]
            step = step * (g ** i)
            running = step if running is None else running + step
            term = (running + ro.values[i] * (g ** (i + 1))) * float(w[i])
            total = term if total is None else total + term
        return total

    def policy_loss(self, z0: np.ndarray, step: int, rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
        """Negative lambda-weighted imagined objective, started from target-encoder latents."""
        cfg = self.cfg
        rng = rng or self.rng
        z0 = Tensor(np.asarray(z0, dtype=np.float64))
        if cfg.modelfree_actor:
            q = _flat(self.critic([z0, self.policy_mean(z0)], frozen=True))
            return -dm.mean(q), {"intrinsic": 0.0}
        c = 0.0 if cfg.no_classifier else cfg.c
        ro = self.rollout(z0, cfg.K, self.sigma(step), rng, c=c)
        loss = -dm.mean(self.rollout_value(ro))
        intr = float(np.mean([t.data.mean() for t in ro.intrinsic]))
        return loss, {"intrinsic": intr}

    # --------------------------------------------------------------- critics

    def classifier_loss(self, batch: SequenceBatch, rng: np.random.Generator | None = None,
                        targ: TargetLatents | None = None) -> tuple[Tensor, dict]:
        """Cross-entropy between encoder next-latents (label 1) and model next-latents (label 0)."""
        rng = rng or self.rng
        targ = targ if targ is not None else self.target_latents(batch.obs[:, :2], rng)
        z0, z1 = targ.sample[:, 0], targ.sample[:, 1]
        a0 = batch.act[:, 0]
        fake = self.model_dist(Tensor(z0), Tensor(a0), frozen=True)
        z_fake = fake.mean.data + fake.std.data * rng.standard_normal(z0.shape)
        B = z0.shape[0]
        nxt = np.concatenate([z1, z_fake])
        labels = np.concatenate([np.ones(B), np.zeros(B)])
        prob = dm.sigmoid(self.classifier([Tensor(nxt), Tensor(np.concatenate([a0, a0])),
                                           Tensor(np.concatenate([z0, z0]))]))
        prob = _flat(prob)
        loss = dm.mean(bernoulli_cross_entropy(prob, labels))
        acc = float(np.mean((prob.data > 0.5) == (labels > 0.5)))
        return loss, {"classifier_acc": acc}

    def td_target(self, r: np.ndarray, terminal: np.ndarray, z_next: np.ndarray) -> np.ndarray:
        a_next = self.policy_mean(Tensor(z_next), frozen=True).data
        q_next = self.critic_targ([Tensor(z_next), Tensor(a_next)], frozen=True).data[:, 0]
        return r + self.cfg.gamma * (1.0 - terminal.astype(np.float64)) * q_next

    def q_loss(self, batch: SequenceBatch, rng: np.random.Generator | None = None,
               targ: TargetLatents | None = None) -> tuple[Tensor, dict]:
        rng = rng or self.rng
        targ = targ if targ is not None else self.target_latents(batch.obs[:, :2], rng)
        r = self.transform_reward(batch.rew[:, 0])
        y = self.td_target(r, batch.terminal[:, 0], targ.sample[:, 1])
        q = _flat(self.critic([Tensor(targ.sample[:, 0]), Tensor(batch.act[:, 0])]))
        return dm.mean(dm.square(q - y)), {"q_mean": float(q.data.mean())}

    def reward_loss(self, batch: SequenceBatch, rng: np.random.Generator | None = None,
                    targ: TargetLatents | None = None) -> tuple[Tensor, dict]:
        rng = rng or self.rng
        targ = targ if targ is not None else self.target_latents(batch.obs[:, :2], rng)
        r = self.transform_reward(batch.rew[:, 0])
        pred = _flat(self.reward([Tensor(targ.sample[:, 0]), Tensor(batch.act[:, 0])]))
        return dm.mean(dm.square(pred - r)), {}

    # ---------------------------------------------------------------- update

    def _apply(self, names: tuple[str, ...], grads: dict, info: dict) -> None:
        for name in names:
            params = self.net(name).params
            g = [grads[p] for p in params]
            info[f"grad_norm_{name}"] = dm.global_norm(g)
            g = dm.clip_global_norm(g, self.cfg.max_grad_norm)
            dm.adam_step(self.optim[name], params, g)

    def _check(self, loss: Tensor, what: str) -> None:
        if self.cfg.debug:
            dm.check_finite(loss, what)

    def update_targets(self, tau: float | None = None) -> None:
        tau = self.cfg.tau if tau is None else tau
        dm.polyak_update(self.encoder_targ.params, self.encoder.params, tau)
        dm.polyak_update(self.critic_targ.params, self.critic.params, tau)

    def update_round(self, batch: SequenceBatch, step: int) -> dict:
        """One round: encoder/model, then policy, then classifier/Q/reward, then targets."""
        info: dict = {}
        rng = self.rng
        targ = self.target_latents(batch.obs, rng)

        with Tape():
            loss, extra = self.encoder_model_loss(batch, rng, targ)
            self._check(loss, "encoder_model_loss")
            params = self.encoder.params + self.model.params
            grads = dm.backward(loss, params)
        info["loss_model"] = loss.item()
        info.update(extra)
        self._apply(("encoder", "model"), grads, info)

        with Tape():
            loss, extra = self.policy_loss(targ.sample[:, 0], step, rng)
            self._check(loss, "policy_loss")
            grads = dm.backward(loss, self.policy.params)
        info["loss_policy"] = loss.item()
        info.update(extra)
        self._apply(("policy",), grads, info)

        with Tape():
            lc, ec = self.classifier_loss(batch, rng, targ)
            lq, eq = self.q_loss(batch, rng, targ)
            lr, _ = self.reward_loss(batch, rng, targ)
            for t, what in ((lc, "classifier_loss"), (lq, "q_loss"), (lr, "reward_loss")):
                self._check(t, what)
            total = lc + lq + lr
            params = self.classifier.params + self.critic.params + self.reward.params
            grads = dm.backward(total, params)
        info.update(loss_classifier=lc.item(), loss_q=lq.item(), loss_reward=lr.item())
        info.update(ec)
        info.update(eq)
        self._apply(("classifier", "critic", "reward"), grads, info)

        self.update_targets()
        self.update_rounds += 1
        return info

    # ------------------------------------------------------------ checkpoint

    def all_nets(self) -> dict[str, MLP]:
        out = {n: self.net(n) for n in self.NETS}
        out["encoder_targ"] = self.encoder_targ
        out["critic_targ"] = self.critic_targ
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for net in self.all_nets().values():
            for k, v in net.named_arrays().items():
                arrays[f"param/{k}"] = v
        for name, st in self.optim.items():
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                arrays[f"adam/{name}/m{i}"] = m
                arrays[f"adam/{name}/v{i}"] = v
        return arrays

    def metadata(self, step: int, extra: dict | None = None) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "env_spec": {"obs_dim": self.spec.obs_dim, "act_dim": self.spec.act_dim,
                         "act_low": self.spec.act_low, "act_high": self.spec.act_high,
                         "horizon": self.spec.horizon, "reward_range": list(self.spec.reward_range)},
            "step": int(step),
            "update_rounds": self.update_rounds,
            "adam_steps": {n: st.step for n, st in self.optim.items()},
            "rng": self.rng.bit_generator.state,
            "extra": extra or {},
        }

    def save(self, path: str | Path, step: int, extra: dict | None = None) -> None:
        meta = json.dumps(self.metadata(step, extra), sort_keys=True)
        arrays = self.state_arrays()
        arrays["__meta__"] = np.frombuffer(meta.encode(), dtype=np.uint8)
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> tuple["Agent", dict]:
        with np.load(path) as f:
            meta = json.loads(bytes(f["__meta__"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ContractError(f"unsupported checkpoint version {meta.get('version')}")
            es = meta["env_spec"]
            spec = EnvSpec(es["obs_dim"], es["act_dim"], es["act_low"], es["act_high"],
                           es["horizon"], tuple(es["reward_range"]))
            agent = cls(spec, AgentConfig.from_dict(meta["config"]))
            for net in agent.all_nets().values():
                for p in net.params:
                    key = f"param/{p.name}"
                    if f[key].shape != p.shape:
                        raise ContractError(f"checkpoint shape mismatch for {p.name}")
                    p.data[...] = f[key]
            for name, st in agent.optim.items():
                for i in range(len(st.m)):
                    st.m[i][...] = f[f"adam/{name}/m{i}"]
                    st.v[i][...] = f[f"adam/{name}/v{i}"]
                st.step = meta["adam_steps"][name]
        agent.update_rounds = meta["update_rounds"]
        agent.rng.bit_generator.state = meta["rng"]
        return agent, meta

    def snapshot(self) -> "Agent":
        """Independent deep copy for read-only evaluation."""
        return copy.deepcopy(self)


def check_numeric(info: dict) -> None:
    for k, v in info.items():
        if isinstance(v, float) and not np.isfinite(v):
            raise NumericError(f"non-finite {k}")
