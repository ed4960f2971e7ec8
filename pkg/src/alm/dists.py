"""Probability primitives: diagonal Gaussians, categoricals, the truncated
geometric horizon distribution, and Bernoulli cross-entropy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .errors import ContractError, DimensionError

STD_FLOOR = 1e-3
PROB_CLAMP = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance over the last axis.

    ``mean`` and ``std`` share a shape; leading axes are batch axes.
    """

    mean: Tensor
    std: Tensor

    @classmethod
    def from_raw(cls, mean: Tensor, raw_std: Tensor, floor: float = STD_FLOOR) -> "DiagGaussian":
        return cls(mean, dm.softplus(raw_std) + floor)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def gaussian_rsample(g: DiagGaussian, noise: np.ndarray) -> Tensor:
    """Reparameterised draw ``mean + std * noise``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise DimensionError(f"noise shape {noise.shape} does not match mean {g.mean.shape}")
    return g.mean + g.std * noise


def gaussian_log_prob(g: DiagGaussian, x) -> Tensor:
    x = dm.as_tensor(x)
    if x.shape != g.mean.shape:
        raise DimensionError(f"log_prob: x {x.shape} vs mean {g.mean.shape}")
    z = (x - g.mean) / g.std
    per_dim = dm.scale(dm.square(z), -0.5) - dm.log(g.std) - HALF_LOG_2PI
    return dm.sum(per_dim, axis=-1)


def gaussian_kl(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """Closed-form KL(p || q), summed over the last axis."""
    if p.mean.shape != q.mean.shape:
        raise DimensionError(f"kl: {p.mean.shape} vs {q.mean.shape}")
    var_ratio = dm.square(p.std / q.std)
    mean_term = dm.square((p.mean - q.mean) / q.std)
    per_dim = dm.scale(var_ratio + mean_term - 1.0, 0.5) - dm.log(p.std / q.std)
    return dm.sum(per_dim, axis=-1)


@dataclass(frozen=True)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ContractError(f"not a probability vector: {p}")
        object.__setattr__(self, "probs", p)

    def log_prob(self, i: int) -> float:
        return float(np.log(self.probs[i]))

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.probs), p=self.probs))

    def kl(self, other: "Categorical") -> float:
        p, q = self.probs, other.probs
        mask = p > 0
        return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def truncgeom_pmf(gamma: float, K: int) -> np.ndarray:
    """P_K(H) over H = 0..K: (1-gamma) gamma^H below K, gamma^K at K."""
    if not 0.0 < gamma < 1.0:
        raise ContractError(f"gamma must be in (0, 1), got {gamma}")
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    h = np.arange(K + 1)
    pmf = (1.0 - gamma) * gamma ** h
    pmf[K] = gamma ** K
    return pmf


@dataclass(frozen=True)
class TruncatedGeometric:
    gamma: float
    K: int

    @property
    def pmf(self) -> np.ndarray:
        return truncgeom_pmf(self.gamma, self.K)

    def expect_prefix_sums(self, x: np.ndarray) -> float:
        """E_H[sum_{t<=H} x_t] by direct enumeration over H."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.K + 1,):
            raise DimensionError(f"need {self.K + 1} values, got shape {x.shape}")
        return float(np.dot(self.pmf, np.cumsum(x)))


def truncgeom_discounted_identity(x, gamma: float, K: int) -> tuple[float, float]:
    """Both sides of the random-horizon identity, computed independently.

    lhs enumerates the horizon; rhs is the plain discounted sum.
    """
    lhs = TruncatedGeometric(gamma, K).expect_prefix_sums(x)
    x = np.asarray(x, dtype=np.float64)
    rhs = float(np.dot(gamma ** np.arange(K + 1), x))
    return lhs, rhs


def lambda_weights(lam: float, K: int) -> np.ndarray:
    """(1-lam) lam^(k-1) for k < K, leftover mass lam^(K-1) on k = K."""
    if not 0.0 <= lam < 1.0:
        raise ContractError(f"lambda must lie in [0, 1), got {lam}")
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    w = (1.0 - lam) * lam ** np.arange(K, dtype=np.float64)
    w[K - 1] = lam ** (K - 1)
    return w


def bernoulli_cross_entropy(p_hat, label):
    """-[y log p + (1-y) log(1-p)] with p clamped to [1e-6, 1-1e-6].

    Works on floats/arrays or on tensors (then differentiable in ``p_hat``).
    """
    if isinstance(p_hat, Tensor):
        p = dm.clip(p_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = np.asarray(label, dtype=np.float64)
        return -(dm.log(p) * y + dm.log(1.0 - p) * (1.0 - y))
    p = np.clip(np.asarray(p_hat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(label, dtype=np.float64)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def clamped_log_odds(p: Tensor) -> Tensor:
    """log(p / (1 - p)) after clamping p into [1e-6, 1-1e-6]."""
    p = dm.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return dm.log(p) - dm.log(1.0 - p)
