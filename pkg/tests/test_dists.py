import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alm import diffmath as dm
from alm.diffmath import Tape, Tensor
from alm.dists import (
    Categorical,
    DiagGaussian,
    TruncatedGeometric,
    bernoulli_cross_entropy,
    clamped_log_odds,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_rsample,
    lambda_weights,
    truncgeom_discounted_identity,
    truncgeom_pmf,
)
from alm.errors import ContractError, DimensionError
from gradcheck import numeric_grad, rel_err


def gauss(mean, std):
    return DiagGaussian(Tensor(np.asarray(mean, float)), Tensor(np.asarray(std, float)))


# ------------------------------------------------------------------ Gaussians

def test_std_floor_holds_for_very_negative_raw():
    g = DiagGaussian.from_raw(Tensor(np.zeros(3)), Tensor(np.array([-800.0, 0.0, 5.0])))
    assert np.all(g.std.data >= 1e-3)
    assert g.std.data[0] == pytest.approx(1e-3)


def test_rsample_trivial_cases():
    g = gauss([1.0, -2.0], [0.5, 3.0])
    np.testing.assert_array_equal(gaussian_rsample(g, np.zeros(2)).data, [1.0, -2.0])
    eps = np.array([0.3, -1.2])
    np.testing.assert_array_equal(gaussian_rsample(gauss([0, 0], [1, 1]), eps).data, eps)
    with pytest.raises(DimensionError):
        gaussian_rsample(g, np.zeros(3))


def test_rsample_is_differentiable_in_mean_and_std(rng):
    mean = Tensor(rng.normal(size=4), requires_grad=True)
    std = Tensor(rng.uniform(0.5, 2.0, size=4), requires_grad=True)
    eps = rng.normal(size=4)
    w = rng.normal(size=4)
    with Tape():
        g = dm.backward(dm.sum(gaussian_rsample(DiagGaussian(mean, std), eps) * w), [mean, std])
    np.testing.assert_allclose(g[mean], w)
    f = lambda: float(np.sum((mean.data + std.data * eps) * w))
    assert rel_err(g[mean], numeric_grad(f, mean.data)) <= 1e-6
    assert rel_err(g[std], numeric_grad(f, std.data)) <= 1e-6


def test_log_prob_reference_values():
    assert gaussian_log_prob(gauss([0.0], [1.0]), [0.0]).item() == pytest.approx(-0.9189385, abs=1e-7)
    mu, sig = np.array([1.0, -3.0, 0.2]), np.array([0.5, 2.0, 1.5])
    expect = -np.sum(np.log(sig * math.sqrt(2 * math.pi)))
    assert gaussian_log_prob(gauss(mu, sig), mu).item() == pytest.approx(expect, abs=1e-12)


def test_log_prob_integrates_to_one():
    g = gauss([0.7], [1.3])
    xs = np.linspace(0.7 - 12 * 1.3, 0.7 + 12 * 1.3, 200_001)
    dens = np.exp(np.array([gaussian_log_prob(g, [x]).item() for x in xs[::1000]]))
    # coarse sanity on the loop path, then the vectorised batch for the real check
    assert np.all(dens > 0)
    batch = DiagGaussian(Tensor(np.full((xs.size, 1), 0.7)), Tensor(np.full((xs.size, 1), 1.3)))
    dens = np.exp(gaussian_log_prob(batch, xs[:, None]).data)
    assert abs(np.trapezoid(dens, xs) - 1.0) <= 1e-6


def test_log_prob_shape_mismatch():
    with pytest.raises(DimensionError):
        gaussian_log_prob(gauss([0.0, 0.0], [1.0, 1.0]), [0.0])


def test_kl_reference_values():
    p = gauss([0.3, -1.0], [0.7, 2.0])
    assert gaussian_kl(p, p).item() == 0.0
    assert gaussian_kl(gauss([1.0], [1.0]), gauss([0.0], [1.0])).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DimensionError):
        gaussian_kl(p, gauss([0.0], [1.0]))


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(11)
    p, q = gauss([0.2, -0.5, 1.0], [0.8, 1.5, 0.6]), gauss([0.0, 0.4, 0.5], [1.0, 1.0, 1.2])
    n = 1_000_000
    x = p.mean.data + p.std.data * rng.standard_normal((n, 3))
    def lp(g):
        return np.sum(-0.5 * ((x - g.mean.data) / g.std.data) ** 2 - np.log(g.std.data)
                      - 0.5 * math.log(2 * math.pi), axis=1)
    diff = lp(p) - lp(q)
    se = diff.std() / math.sqrt(n)
    assert abs(diff.mean() - gaussian_kl(p, q).item()) <= 3 * se


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 5), st.floats(-5, 5), st.floats(0.01, 5)),
                min_size=1, max_size=4))
def test_kl_nonnegative(params):
    mp, sp, mq, sq = (np.array(c) for c in zip(*params))
    kl = gaussian_kl(gauss(mp, sp), gauss(mq, sq)).item()
    assert kl >= -1e-12


@pytest.mark.parametrize("seed", range(20))
def test_kl_gradient(seed):
    r = np.random.default_rng(seed)
    arrays = [r.normal(size=3), r.uniform(0.3, 2, 3), r.normal(size=3), r.uniform(0.3, 2, 3)]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        g = dm.backward(gaussian_kl(DiagGaussian(*leaves[:2]), DiagGaussian(*leaves[2:])), leaves)
    value = lambda: gaussian_kl(DiagGaussian(*[Tensor(t.data) for t in leaves[:2]]),
                                DiagGaussian(*[Tensor(t.data) for t in leaves[2:]])).item()
    for t in leaves:
        assert rel_err(g[t], numeric_grad(value, t.data)) <= 1e-5


# --------------------------------------------------------------- categorical

def test_categorical_validation_and_kl():
    with pytest.raises(ContractError):
        Categorical(np.array([0.5, 0.6]))
    with pytest.raises(ContractError):
        Categorical(np.array([1.5, -0.5]))
    p = Categorical(np.array([0.25, 0.75]))
    assert p.kl(p) == 0.0
    assert p.log_prob(1) == pytest.approx(math.log(0.75))
    q = Categorical(np.array([0.5, 0.5]))
    assert p.kl(q) == pytest.approx(0.25 * math.log(0.5) + 0.75 * math.log(1.5))


def test_categorical_sampling_frequency():
    rng = np.random.default_rng(0)
    c = Categorical(np.array([0.1, 0.2, 0.7]))
    draws = np.array([c.sample(rng) for _ in range(20_000)])
    freq = np.bincount(draws, minlength=3) / draws.size
    assert np.all(np.abs(freq - c.probs) <= 4 * np.sqrt(c.probs * (1 - c.probs) / draws.size))


# ----------------------------------------------------- truncated geometric

def test_truncgeom_reference_pmf():
    np.testing.assert_allclose(truncgeom_pmf(0.99, 3), [0.01, 0.0099, 0.009801, 0.970299], atol=1e-15)
    np.testing.assert_allclose(truncgeom_pmf(0.3, 1), [0.7, 0.3])


@pytest.mark.parametrize("gamma", [0.01, 0.5, 0.9, 0.99, 0.999])
@pytest.mark.parametrize("K", range(1, 11))
def test_truncgeom_is_distribution(gamma, K):
    pmf = TruncatedGeometric(gamma, K).pmf
    assert pmf.shape == (K + 1,)
    assert np.all(pmf >= 0)
    assert abs(pmf.sum() - 1.0) <= 1e-14


@pytest.mark.parametrize("gamma,K", [(0.0, 3), (1.0, 3), (0.5, 0)])
def test_truncgeom_rejects_bad_parameters(gamma, K):
    with pytest.raises(ContractError):
        truncgeom_pmf(gamma, K)


def test_discounted_identity_examples():
    assert truncgeom_discounted_identity([1.0, 1.0], 0.5, 1) == pytest.approx((1.5, 1.5))
    assert truncgeom_discounted_identity(np.zeros(4), 0.9, 3) == (0.0, 0.0)


def test_discounted_identity_sweep():
    rng = np.random.default_rng(5)
    for _ in range(100):
        K = int(rng.integers(1, 11))
        gamma = float(rng.uniform(0.01, 0.99))
        lhs, rhs = truncgeom_discounted_identity(rng.normal(size=K + 1), gamma, K)
        assert abs(lhs - rhs) <= 1e-12


def test_discounted_identity_wrong_length():
    with pytest.raises(DimensionError):
        truncgeom_discounted_identity(np.zeros(3), 0.5, 3)


def test_lambda_weights():
    np.testing.assert_allclose(lambda_weights(0.95, 3), [0.05, 0.0475, 0.9025])
    np.testing.assert_array_equal(lambda_weights(0.0, 2), [1.0, 0.0])
    for K in range(1, 8):
        assert lambda_weights(0.7, K).sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ContractError):
        lambda_weights(1.0, 3)


# ------------------------------------------------------------ cross-entropy

def test_bce_reference_values():
    assert bernoulli_cross_entropy(1 - 1e-9, 1) == pytest.approx(1e-6, abs=2e-6)
    assert bernoulli_cross_entropy(0.5, 0) == pytest.approx(math.log(2))
    assert bernoulli_cross_entropy(0.5, 1) == pytest.approx(math.log(2))
    assert math.isfinite(bernoulli_cross_entropy(0.0, 1))


@pytest.mark.parametrize("label", [0, 1])
def test_bce_minimised_at_label(label):
    grid = np.linspace(0.0, 1.0, 1001)
    losses = bernoulli_cross_entropy(grid, label)
    assert grid[np.argmin(losses)] == label


def test_bce_tensor_path_matches_array_path(rng):
    p = rng.uniform(0.01, 0.99, size=6)
    y = rng.integers(0, 2, size=6).astype(float)
    np.testing.assert_allclose(bernoulli_cross_entropy(Tensor(p), y).data, bernoulli_cross_entropy(p, y))
    x = Tensor(p.copy(), requires_grad=True)
    with Tape():
        g = dm.backward(dm.sum(bernoulli_cross_entropy(x, y)), [x])
    np.testing.assert_allclose(g[x], (p - y) / (p * (1 - p)), rtol=1e-10)


def test_clamped_log_odds():
    out = clamped_log_odds(Tensor(np.array([0.5, 0.0, 1.0, 0.8]))).data
    lim = math.log((1 - 1e-6) / 1e-6)
    np.testing.assert_allclose(out, [0.0, -lim, lim, math.log(4.0)], rtol=1e-10)
