"""Sweeps of the exact tabular checks, one structured record per check."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator, TextIO

import numpy as np

from .. import oracle
from ..dists import truncgeom_discounted_identity

BOUND_TOL = 1e-10
TIGHT_TOL = 1e-9
HORIZON_TOL = 1e-12
PSI_TOL = 1e-10
SOFTMAX_PERTURBATIONS = 1000
LAMBDA = 0.95


@dataclass
class CheckRecord:
    check: str
    seed: int
    lhs: float
    rhs: float
    margin: float
    passed: bool

    def as_json(self) -> str:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return json.dumps(d)


def _leq(check: str, seed: int, lhs: float, rhs: float, tol: float) -> CheckRecord:
    """lhs <= rhs, allowing ``tol`` of violation; margin = rhs - lhs."""
    margin = rhs - lhs
    return CheckRecord(check, seed, lhs, rhs, margin, bool(margin >= -tol))


def _eq(check: str, seed: int, lhs: float, rhs: float, tol: float) -> CheckRecord:
    gap = abs(lhs - rhs)
    return CheckRecord(check, seed, lhs, rhs, -gap, bool(gap <= tol))


def instance(seed: int) -> tuple[oracle.TabularMDP, oracle.TabularALM, np.random.Generator]:
    rng = np.random.default_rng(seed)
    mdp, alm = oracle.random_instance(rng)
    return mdp, alm, rng


def bound_checks(seed: int, k_max: int) -> list[CheckRecord]:
    mdp, alm, _ = instance(seed)
    bounds = oracle.bound_sequence(mdp, alm, k_max)
    log_true = oracle.log_true_objective(mdp, alm)
    out = [_leq(f"bound_K{k}", seed, float(b), log_true, BOUND_TOL)
           for k, b in enumerate(bounds, 1)]
    out += [_leq(f"monotone_K{k}", seed, float(bounds[k]), float(bounds[k - 1]), BOUND_TOL)
            for k in range(1, k_max)]
    lam = float(np.dot(oracle.lambda_weights(LAMBDA, k_max), bounds))
    out.append(_leq("lambda_bound", seed, lam, log_true, BOUND_TOL))
    return out


def tightness_check(seed: int, K: int) -> CheckRecord:
    mdp, alm, _ = instance(seed)
    bound, log_true = oracle.check_tightness(mdp, alm, K)
    return _eq(f"tightness_K{K}", seed, bound, log_true, TIGHT_TOL)


def horizon_identity_check(seed: int) -> CheckRecord:
    rng = np.random.default_rng([seed, 1])
    K = int(rng.integers(1, 11))
    gamma = float(rng.uniform(0.01, 0.99))
    x = rng.normal(size=K + 1)
    lhs, rhs = truncgeom_discounted_identity(x, gamma, K)
    return _eq("horizon_identity", seed, lhs, rhs, HORIZON_TOL)


def psi_identity_check(seed: int, K: int) -> CheckRecord:
    mdp, alm, _ = instance(seed)
    lhs, rhs = oracle.psi_identity(mdp, alm, K)
    return _eq(f"psi_identity_K{K}", seed, lhs, rhs, PSI_TOL)


def softmax_check(seed: int, perturbations: int = SOFTMAX_PERTURBATIONS) -> CheckRecord:
    """Softmax value against the best of random perturbed pmfs (margin = best gap)."""
    rng = np.random.default_rng([seed, 3])
    n = int(rng.integers(2, 9))
    f = rng.normal(scale=2.0, size=n)
    p_star = oracle.softmax_maximizer(f)
    best = oracle.entropy_objective(p_star, f)
    rival = -np.inf
    for i in range(perturbations):
        if i % 2 == 0:
            q = p_star * np.exp(rng.normal(scale=rng.uniform(1e-3, 1.0), size=n))
        else:
            q = rng.dirichlet(np.ones(n))
        q = q / q.sum()
        rival = max(rival, oracle.entropy_objective(q, f))
    return _leq("softmax_max", seed, rival, best, 0.0)


def offline_check(seed: int, K: int) -> CheckRecord:
    mdp, alm, rng = instance(seed)
    behavior = oracle.random_instance(rng, (mdp.n_states, mdp.n_actions, 2))[1].state_policy()
    bound = oracle.offline_bound(mdp, alm, behavior, K)
    return _leq(f"offline_K{K}", seed, bound, oracle.offline_log_objective(mdp, behavior), BOUND_TOL)


def log_shift_check(seed: int) -> CheckRecord:
    a = 10_000.0
    r = np.linspace(0.0, 100.0, 10_001)
    dev = oracle.log_shift_equivalence(r, a)
    return _leq("log_shift", seed, dev, oracle.log_shift_tolerance(float(r.max()), a), 0.0)


def sweep(instances: int, k_max: int, seed: int) -> Iterator[CheckRecord]:
    """Every check on ``instances`` random instances seeded seed, seed+1, ..."""
    k_side = max(1, k_max - 1)
    for i in range(instances):
        s = seed + i
        yield from bound_checks(s, k_max)
        yield tightness_check(s, k_side)
        yield horizon_identity_check(s)
        yield psi_identity_check(s, k_side)
        yield softmax_check(s)
        yield offline_check(s, k_side)
    yield log_shift_check(seed)


def run_verify(instances: int, k_max: int, seed: int, stream: TextIO) -> tuple[int, int]:
    """Write one JSON line per check; returns (checks, failures)."""
    total = failures = 0
    for rec in sweep(instances, k_max, seed):
        stream.write(rec.as_json() + "\n")
        total += 1
        failures += not rec.passed
    return total, failures
