"""Exact checks of the lower-bound mathematics on small finite MDPs.

Everything here is computed by literal enumeration of (s, z, a) trajectories
(or, for infinite-horizon quantities, a linear solve), so no sampling error
enters any comparison. Tables are indexed as

    p0[s], P[s, a, s'], r[s, a]            (environment)
    e[s, z], m[z, a, z'], pi[z, a]         (encoder, latent model, policy)

Returns follow the convention sum_t gamma^t r; Q-values carry the extra
(1 - gamma) normalisation, so for a constant reward r the Q-value is r.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dists import lambda_weights, truncgeom_pmf
from .errors import ContractError, DegenerateInstanceError, DomainError

ROW_TOL = 1e-10
POSITIVITY_FLOOR = 1e-6


def _check_rows(name: str, table: np.ndarray) -> None:
    if np.any(table < 0):
        raise ContractError(f"{name} has negative entries")
    err = np.abs(table.sum(axis=-1) - 1.0).max()
    if err > ROW_TOL:
        raise ContractError(f"{name} rows do not sum to 1 (max error {err:.3g})")


@dataclass
class TabularMDP:
    p0: np.ndarray
    P: np.ndarray
    r: np.ndarray
    gamma: float

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        self.P = np.asarray(self.P, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        S, A = self.r.shape
        if self.p0.shape != (S,) or self.P.shape != (S, A, S):
            raise ContractError(f"inconsistent shapes p0{self.p0.shape} P{self.P.shape} r{self.r.shape}")
        _check_rows("p0", self.p0)
        _check_rows("P", self.P)
        if np.any(self.r < 0):
            raise ContractError("rewards must be nonnegative")

    @property
    def n_states(self) -> int:
        return self.r.shape[0]

    @property
    def n_actions(self) -> int:
        return self.r.shape[1]


@dataclass
class TabularALM:
    e: np.ndarray
    m: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        S, Z = self.e.shape
        A = self.pi.shape[1]
        if self.pi.shape != (Z, A) or self.m.shape != (Z, A, Z):
            raise ContractError(f"inconsistent shapes e{self.e.shape} m{self.m.shape} pi{self.pi.shape}")
        for name, t in (("e", self.e), ("m", self.m), ("pi", self.pi)):
            _check_rows(name, t)
            if np.any(t <= 0):
                idx = tuple(int(i) for i in np.argwhere(t <= 0)[0])
                raise ContractError(f"{name}{list(idx)} is not strictly positive")

    @property
    def n_latents(self) -> int:
        return self.e.shape[1]

    def state_policy(self) -> np.ndarray:
        """pi_bar(a|s) = sum_z pi(a|z) e(z|s)."""
        return self.e @ self.pi


def _dims_match(mdp: TabularMDP, alm: TabularALM) -> None:
    if alm.e.shape[0] != mdp.n_states or alm.pi.shape[1] != mdp.n_actions:
        raise ContractError("MDP and ALM tables disagree on |S| or |A|")


# ------------------------------------------------------------ random instances

def _dirichlet_rows(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    x = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
    x = np.maximum(x, POSITIVITY_FLOOR)
    return x / x.sum(axis=-1, keepdims=True)


def random_instance(
    rng: np.random.Generator,
    sizes: tuple[int, int, int] | None = None,
    gamma: float | None = None,
) -> tuple[TabularMDP, TabularALM]:
    """Dirichlet(1) tables floored at 1e-6, rewards U(0.1, 1), gamma in {0.9, 0.99}."""
    if sizes is None:
        S, A, Z = (int(v) for v in rng.integers(2, 4, size=3))
    else:
        S, A, Z = sizes
    if gamma is None:
        gamma = float(rng.choice([0.9, 0.99]))
    mdp = TabularMDP(
        p0=_dirichlet_rows(rng, (S,)),
        P=_dirichlet_rows(rng, (S, A, S)),
        r=rng.uniform(0.1, 1.0, size=(S, A)),
        gamma=gamma,
    )
    alm = TabularALM(
        e=_dirichlet_rows(rng, (S, Z)),
        m=_dirichlet_rows(rng, (Z, A, Z)),
        pi=_dirichlet_rows(rng, (Z, A)),
    )
    return mdp, alm


# ------------------------------------------------------------ exact evaluation

def _policy_values(mdp: TabularMDP, pi_bar: np.ndarray) -> np.ndarray:
    """V(s) = E[sum_t gamma^t r] under the state policy, by linear solve."""
    if not 0.0 <= mdp.gamma < 1.0:
        raise ContractError(f"discount must lie in [0, 1) for a finite value, got {mdp.gamma}")
    S = mdp.n_states
    P_pi = np.einsum("sa,sat->st", pi_bar, mdp.P)
    r_pi = np.einsum("sa,sa->s", pi_bar, mdp.r)
    system = np.eye(S) - mdp.gamma * P_pi
    V = np.linalg.solve(system, r_pi)
    residual = np.abs(system @ V - r_pi).max()
    if residual > 1e-12 * max(1.0, np.abs(r_pi).max()):
        raise ContractError(f"policy evaluation residual {residual:.3g} too large")
    return V


def exact_returns(mdp: TabularMDP, alm: TabularALM) -> float:
    _dims_match(mdp, alm)
    return float(mdp.p0 @ _policy_values(mdp, alm.state_policy()))


def state_policy_returns(mdp: TabularMDP, pi_bar: np.ndarray) -> float:
    return float(mdp.p0 @ _policy_values(mdp, pi_bar))


def state_policy_q(mdp: TabularMDP, pi_bar: np.ndarray) -> np.ndarray:
    """(1 - gamma)-normalised Q table of a state policy."""
    V = _policy_values(mdp, pi_bar)
    g = mdp.gamma
    return (1.0 - g) * (mdp.r + g * np.einsum("sat,t->sa", mdp.P, V))


def exact_q(mdp: TabularMDP, alm: TabularALM) -> np.ndarray:
    _dims_match(mdp, alm)
    return state_policy_q(mdp, alm.state_policy())


def log_true_objective(mdp: TabularMDP, alm: TabularALM) -> float:
    """log of the (1 - gamma)-scaled expected return."""
    return float(np.log((1.0 - mdp.gamma) * exact_returns(mdp, alm)))


# ------------------------------------------------------------ enumeration core

class _Frontier:
    """All trajectory prefixes of a given length, one row per trajectory."""

    def __init__(self, prob, s, z, a, value, hist=None):
        self.prob = prob
        self.s = s
        self.z = z
        self.a = a
        self.value = value
        self.hist = hist  # (N, t+1, 3) int array of (s, z, a), when tracked

    def __len__(self):
        return self.prob.size


def _start(mdp: TabularMDP, alm: TabularALM, pi_state: np.ndarray | None = None,
           track: bool = False) -> _Frontier:
    S, A, Z = mdp.n_states, mdp.n_actions, alm.n_latents
    s, z, a = (g.reshape(-1) for g in np.meshgrid(np.arange(S), np.arange(Z), np.arange(A),
                                                  indexing="ij"))
    act = alm.pi[z, a] if pi_state is None else pi_state[s, a]
    prob = mdp.p0[s] * alm.e[s, z] * act
    # int8 keeps the K=4 path tables of 3x3x3 instances within a few hundred MB
    hist = np.stack([s, z, a], axis=-1)[:, None, :].astype(np.int8) if track else None
    return _Frontier(prob, s, z, a, np.zeros(prob.size), hist)


def _extend(f: _Frontier, mdp: TabularMDP, alm: TabularALM, latent: str,
            step_value=None, pi_state: np.ndarray | None = None) -> _Frontier:
    """Append one (s', z', a') step to every trajectory.

    ``latent`` chooses the latent kernel: "model" draws z' ~ m(.|z, a),
    "encoder" draws z' ~ e(.|s'). ``step_value(child)`` returns the
    increment to add to each extended trajectory's running value.
    """
    S, A, Z = mdp.n_states, mdp.n_actions, alm.n_latents
    n = len(f)
    trans = mdp.P[f.s, f.a][:, :, None, None]                    # (n, S, 1, 1)
    if latent == "model":
        lat = alm.m[f.z, f.a][:, None, :, None]                  # (n, 1, Z, 1)
    elif latent == "encoder":
        lat = alm.e[None, :, :, None]                            # (1, S, Z, 1)
    else:
        raise ContractError(f"unknown latent kernel {latent!r}")
    if pi_state is None:
        act = alm.pi[None, None, :, :]                           # (1, 1, Z, A)
    else:
        act = pi_state[None, :, None, :]                         # (1, S, 1, A)
    prob = (f.prob[:, None, None, None] * trans * lat * act).reshape(-1)
    rows = np.repeat(np.arange(n), S * Z * A)
    grid = np.indices((S, Z, A), dtype=np.int8).reshape(3, -1)
    s2 = np.tile(grid[0], n)
    z2 = np.tile(grid[1], n)
    a2 = np.tile(grid[2], n)
    value = f.value[rows]
    child = _Frontier(prob, s2, z2, a2, value)
    child.parent_s, child.parent_z, child.parent_a = f.s[rows], f.z[rows], f.a[rows]
    if step_value is not None:
        child.value = value + step_value(child)
    if f.hist is not None:
        step = np.stack([s2, z2, a2], -1)[:, None, :]
        child.hist = np.concatenate([f.hist[rows], step], axis=1)
    return child


def _expect(f: _Frontier, values: np.ndarray) -> float:
    mask = f.prob > 0
    return float(np.dot(f.prob[mask], values[mask]))


def _require_positive_rewards(mdp: TabularMDP) -> None:
    bad = np.argwhere(mdp.r <= 0)
    if bad.size:
        s, a = (int(i) for i in bad[0])
        raise DomainError(f"log of reward r[s={s}, a={a}] = {mdp.r[s, a]} (rewards must be > 0)")


# ---------------------------------------------------------------- the bound

def bound_sequence(mdp: TabularMDP, alm: TabularALM, K_max: int) -> np.ndarray:
    """[L^1, ..., L^K_max] from one incremental enumeration under q^K.

    L^K = E_q[ sum_{t<K} gamma^t ((1-g) log r(s_t,a_t) + log e(z_{t+1}|s_{t+1})
                                  - log m(z_{t+1}|z_t,a_t)) + gamma^K log Q(s_K,a_K) ]
    """
    _dims_match(mdp, alm)
    if K_max < 1:
        raise ContractError(f"K must be >= 1, got {K_max}")
    _require_positive_rewards(mdp)
    g = mdp.gamma
    log_r = np.log(mdp.r)
    log_e = np.log(alm.e)
    log_m = np.log(alm.m)
    log_Q = np.log(exact_q(mdp, alm))
    f = _start(mdp, alm)
    out = []
    for t in range(K_max):
        w = g ** t

        def step_value(c, w=w):
            return w * ((1.0 - g) * log_r[c.parent_s, c.parent_a]
                        + log_e[c.s, c.z] - log_m[c.parent_z, c.parent_a, c.z])

        f = _extend(f, mdp, alm, "model", step_value)
        out.append(_expect(f, f.value + g ** (t + 1) * log_Q[f.s, f.a]))
    return np.array(out)


def eval_lower_bound(mdp: TabularMDP, alm: TabularALM, K: int) -> float:
    return float(bound_sequence(mdp, alm, K)[-1])


def lower_bound_dp(mdp: TabularMDP, alm: TabularALM, K: int) -> float:
    """Same quantity as :func:`eval_lower_bound`, by backward recursion.

    Used only as a cross-check of the enumeration path.
    """
    _require_positive_rewards(mdp)
    g = mdp.gamma
    log_r, log_e, log_m = np.log(mdp.r), np.log(alm.e), np.log(alm.m)
    log_Q = np.log(exact_q(mdp, alm))
    S, A, Z = mdp.n_states, mdp.n_actions, alm.n_latents
    W = np.broadcast_to(g ** K * log_Q[:, None, :], (S, Z, A)).copy()   # W[s, z, a]
    for t in range(K - 1, -1, -1):
        # continuation: E over s', z', a' of [g^t (log e(z'|s') - log m(z'|z,a)) + W(s',z',a')]
        cont = np.einsum("xa,sxa->sx", alm.pi, W)                      # E_a'[W(s', z', a')]
        cons = g ** t * (log_e[:, :, None, None] - log_m.transpose(2, 0, 1)[None])  # [s', z', z, a]
        total = cont[:, :, None, None] + cons                          # [s', z', z, a]
        # weight by P(s'|s,a) m(z'|z,a)
        W_new = np.einsum("sat,zax,txza->sza", mdp.P, alm.m, total)
        W = g ** t * (1.0 - g) * log_r[:, None, :] + W_new
    return float(np.einsum("s,sz,za,sza->", mdp.p0, alm.e, alm.pi, W))


# ------------------------------------------------- horizon-indexed objective

def _psi(mdp: TabularMDP, Q: np.ndarray, H: int, K: int, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return mdp.r[s, a] if H < K else Q[s, a]


def psi_expectations(mdp: TabularMDP, alm: TabularALM, K: int) -> np.ndarray:
    """E_{p(tau|H)}[Psi] for H = 0..K, where Psi is r(s_H,a_H) below K and Q(s_K,a_K) at K."""
    _dims_match(mdp, alm)
    Q = exact_q(mdp, alm)
    f = _start(mdp, alm)
    out = [_expect(f, _psi(mdp, Q, 0, K, f.s, f.a))]
    for H in range(1, K + 1):
        f = _extend(f, mdp, alm, "encoder")
        out.append(_expect(f, _psi(mdp, Q, H, K, f.s, f.a)))
    return np.array(out)


def psi_identity(mdp: TabularMDP, alm: TabularALM, K: int) -> tuple[float, float]:
    """((1-gamma) * returns, E_{P_K(H)} E_{p(tau|H)}[Psi])."""
    lhs = (1.0 - mdp.gamma) * exact_returns(mdp, alm)
    rhs = float(np.dot(truncgeom_pmf(mdp.gamma, K), psi_expectations(mdp, alm, K)))
    return lhs, rhs


@dataclass
class TrajectoryDist:
    """Explicit table of length-(H+1) trajectories.

    ``paths[i, t]`` holds (s_t, z_t, a_t) of trajectory i.
    """

    H: int
    paths: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        total = self.probs.sum()
        if abs(total - 1.0) > 1e-12:
            raise ContractError(f"trajectory probabilities sum to {total!r}")

    def reweight(self, weights: np.ndarray) -> "TrajectoryDist":
        w = self.probs * weights
        z = w.sum()
        if not z > 0:
            raise DegenerateInstanceError(f"reweighting horizon {self.H} leaves zero mass")
        return TrajectoryDist(self.H, self.paths, w / z)

    def expect(self, values: np.ndarray) -> float:
        mask = self.probs > 0
        return float(np.dot(self.probs[mask], values[mask]))

    @property
    def last_states(self) -> np.ndarray:
        return self.paths[:, -1, 0]

    @property
    def last_actions(self) -> np.ndarray:
        return self.paths[:, -1, 2]


def trajectory_tables(mdp: TabularMDP, alm: TabularALM, K: int, latent: str = "encoder") -> list[TrajectoryDist]:
    """p(tau|H) (latent="encoder") or q(tau|H) (latent="model") for H = 0..K."""
    _dims_match(mdp, alm)
    f = _start(mdp, alm, track=True)
    out = [TrajectoryDist(0, f.hist, f.prob)]
    for H in range(1, K + 1):
        f = _extend(f, mdp, alm, latent)
        out.append(TrajectoryDist(H, f.hist, f.prob))
    return out


def optimal_latent_dynamics(mdp: TabularMDP, alm: TabularALM, K: int) -> list[TrajectoryDist]:
    """q*(tau|H): p(tau|H) reweighted by r(s_H,a_H) (H<K) or Q(s_K,a_K) (H=K)."""
    Q = exact_q(mdp, alm)
    out = []
    for dist in trajectory_tables(mdp, alm, K, "encoder"):
        psi = _psi(mdp, Q, dist.H, K, dist.last_states, dist.last_actions)
        out.append(dist.reweight(psi))
    return out


def optimal_discount(mdp: TabularMDP, alm: TabularALM, K: int) -> np.ndarray:
    """gamma*(H) proportional to P_K(H) E_{p(tau|H)}[Psi]."""
    w = truncgeom_pmf(mdp.gamma, K) * psi_expectations(mdp, alm, K)
    total = w.sum()
    if not total > 0:
        raise DegenerateInstanceError("optimal discount has zero normaliser")
    return w / total


def discount_bound(
    mdp: TabularMDP,
    alm: TabularALM,
    K: int,
    q_tables: list[TrajectoryDist],
    discount: np.ndarray,
) -> float:
    """The learned-discount bound for arbitrary q(tau|H) and discount pmf:

        sum_H d(H) sum_tau q(tau|H) log[ P_K(H) p(tau|H) Psi(tau) / (d(H) q(tau|H)) ]

    ``q_tables`` must be aligned row-for-row with the p(tau|H) enumeration.
    """
    Q = exact_q(mdp, alm)
    P_K = truncgeom_pmf(mdp.gamma, K)
    total = 0.0
    for H, (p_dist, q_dist) in enumerate(zip(trajectory_tables(mdp, alm, K, "encoder"), q_tables)):
        if q_dist.probs.shape != p_dist.probs.shape or not np.array_equal(q_dist.paths, p_dist.paths):
            raise ContractError(f"q table for horizon {H} is not aligned with p(tau|H)")
        if discount[H] == 0:
            continue
        mask = q_dist.probs > 0
        if np.any(p_dist.probs[mask] <= 0):
            return -np.inf
        psi = _psi(mdp, Q, H, K, p_dist.last_states, p_dist.last_actions)[mask]
        if np.any(psi <= 0):
            return -np.inf
        inner = (np.log(P_K[H]) + np.log(p_dist.probs[mask]) + np.log(psi)
                 - np.log(discount[H]) - np.log(q_dist.probs[mask]))
        total += discount[H] * float(np.dot(q_dist.probs[mask], inner))
    return total


def check_tightness(mdp: TabularMDP, alm: TabularALM, K: int) -> tuple[float, float]:
    """(bound at q* and gamma*, log of the true objective)."""
    bound = discount_bound(mdp, alm, K, optimal_latent_dynamics(mdp, alm, K),
                           optimal_discount(mdp, alm, K))
    return bound, log_true_objective(mdp, alm)


def check_monotone(mdp: TabularMDP, alm: TabularALM, K_max: int) -> np.ndarray:
    if K_max < 2:
        raise ContractError(f"K_max must be >= 2, got {K_max}")
    return bound_sequence(mdp, alm, K_max)


# ------------------------------------------------------------ other bounds

def softmax_maximizer(f: np.ndarray) -> np.ndarray:
    """argmax_p E_p[f - log p] over pmfs on a finite support: softmax(f)."""
    f = np.asarray(f, dtype=np.float64)
    w = np.exp(f - f.max())
    return w / w.sum()


def entropy_objective(p: np.ndarray, f: np.ndarray) -> float:
    """E_p[f - log p] with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    mask = p > 0
    return float(np.dot(p[mask], f[mask] - np.log(p[mask])))


def lambda_weighted_bound(mdp: TabularMDP, alm: TabularALM, lam: float, K_max: int) -> float:
    return float(np.dot(lambda_weights(lam, K_max), bound_sequence(mdp, alm, K_max)))


def offline_bound(
    mdp: TabularMDP,
    alm: TabularALM,
    behavior: np.ndarray,
    K: int,
    form: str = "shifted",
) -> float:
    """Offline variant of the bound, with a behaviour-cloning term.

    The true objective is the return of the behaviour state policy
    ``behavior[s, a]``; the bootstrap uses that policy's normalised Q.

    ``form="derived"`` charges log(pi_b(a_t|s_t) / pi(a_t|z_t)) for every
    action a_0..a_K and the latent consistency term at t = 1..K, each with
    weight gamma^t. ``form="shifted"`` charges both terms at t+1 with weight
    gamma^t for t < K instead (no a_0 term).
    """
    _dims_match(mdp, alm)
    behavior = np.asarray(behavior, dtype=np.float64)
    _check_rows("behavior", behavior)
    if np.any(behavior <= 0):
        raise ContractError("behaviour policy must be strictly positive")
    _require_positive_rewards(mdp)
    g = mdp.gamma
    log_r, log_e, log_m = np.log(mdp.r), np.log(alm.e), np.log(alm.m)
    log_pi, log_b = np.log(alm.pi), np.log(behavior)
    log_Qb = np.log(state_policy_q(mdp, behavior))
    f = _start(mdp, alm)
    if form == "derived":
        f.value = log_b[f.s, f.a] - log_pi[f.z, f.a]
    elif form != "shifted":
        raise ContractError(f"unknown form {form!r}")
    for t in range(K):
        w_now = g ** t
        w_next = g ** (t + 1) if form == "derived" else g ** t

        def step_value(c, w_now=w_now, w_next=w_next):
            return (w_now * (1.0 - g) * log_r[c.parent_s, c.parent_a]
                    + w_next * (log_e[c.s, c.z] - log_m[c.parent_z, c.parent_a, c.z]
                                + log_b[c.s, c.a] - log_pi[c.z, c.a]))

        f = _extend(f, mdp, alm, "model", step_value)
    return _expect(f, f.value + g ** K * log_Qb[f.s, f.a])


def offline_log_objective(mdp: TabularMDP, behavior: np.ndarray) -> float:
    return float(np.log((1.0 - mdp.gamma) * state_policy_returns(mdp, behavior)))


def log_shift_transform(r: np.ndarray, a: float) -> np.ndarray:
    """a * (log(r + a) - log a), computed as a * log1p(r / a)."""
    return a * np.log1p(np.asarray(r, dtype=np.float64) / a)


def log_shift_equivalence(r_values, a: float) -> float:
    """max |a (log(r + a) - log a) - r| over the given rewards."""
    if a <= 0:
        raise ContractError(f"shift must be positive, got {a}")
    r = np.asarray(r_values, dtype=np.float64)
    if np.any(r < 0):
        raise ContractError("rewards must be nonnegative")
    return float(np.max(np.abs(log_shift_transform(r, a) - r)))


def log_shift_tolerance(r_max: float, a: float) -> float:
    """Second-order Taylor remainder r^2 / (2a), padded by 10%."""
    return 1.1 * r_max ** 2 / (2.0 * a)
