import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alm import diffmath as dm
from alm.diffmath import AdamState, Tape, Tensor
from alm.errors import ContractError, DimensionError, DomainError, NumericError
from gradcheck import numeric_grad, rel_err


def leaf(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


# ------------------------------------------------------------- forward values

def test_matmul_identity_and_product():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0], [4.0]])
    np.testing.assert_array_equal(dm.matmul(a, b).data, [[3.0], [4.0]])
    np.testing.assert_array_equal(dm.matmul(Tensor([[1.0, 2.0]]), b).data, [[11.0]])


def test_matmul_gradient_matches_hand_value():
    a = leaf([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    with Tape():
        g = dm.backward(dm.sum(a @ b), [a])
    np.testing.assert_allclose(g[a], [[3.0, 4.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_reference_values():
    assert dm.elu(Tensor(0.0)).item() == 0.0
    assert dm.elu(Tensor(-50.0)).item() == pytest.approx(-1.0, abs=1e-12)
    assert dm.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0), abs=1e-12)
    x = leaf(0.0)
    with Tape():
        g = dm.backward(dm.tanh(x), [x])
    assert g[x] == pytest.approx(1.0)


def test_elementwise_dispatch_and_unknown_op():
    x = Tensor([1.0, 2.0])
    np.testing.assert_allclose(dm.elementwise("scale", x, 3.0).data, [3.0, 6.0])
    np.testing.assert_allclose(dm.elementwise("negate", x).data, [-1.0, -2.0])
    with pytest.raises(ContractError):
        dm.elementwise("cube", x)


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(DomainError):
        dm.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        dm.log(Tensor([-1.0]))


def test_broadcasting_is_limited_to_scalars_and_equal_shapes():
    dm.add(Tensor(np.ones((2, 3))), Tensor(2.0))
    with pytest.raises(DimensionError):
        dm.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_reductions():
    assert dm.sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert dm.mean(Tensor([2.0, 4.0])).item() == 3.0
    x = leaf([1.0, 5.0])
    with Tape():
        g = dm.backward(dm.reduce("mean", x), [x])
    np.testing.assert_allclose(g[x], [0.5, 0.5])
    with pytest.raises(DimensionError):
        dm.sum(Tensor(np.ones((2, 2))), axis=2)


def test_layer_norm_values():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(dm.layer_norm(Tensor([[5.0, 5.0]]), g, b).data, [[0.0, 0.0]])
    np.testing.assert_allclose(dm.layer_norm(Tensor([[0.0, 2.0]]), g, b).data, [[-1.0, 1.0]], atol=1e-7)


def test_layer_norm_requires_two_features():
    with pytest.raises(DimensionError):
        dm.layer_norm(Tensor([[1.0]]), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_layer_norm_rows_are_standardised(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(50, 7)))
    y = dm.layer_norm(x, Tensor(np.ones(7)), Tensor(np.zeros(7))).data
    assert np.max(np.abs(y.mean(axis=1))) <= 1e-10
    assert np.max(np.abs(y.var(axis=1) - 1.0)) <= 1e-6


# ------------------------------------------------------------------ backward

def test_backward_square():
    x = leaf(3.0)
    with Tape():
        g = dm.backward(x * x, [x])
    assert g[x] == pytest.approx(6.0)


def test_backward_requires_scalar_loss():
    x = leaf([1.0, 2.0])
    with Tape():
        y = x * x
        with pytest.raises(ContractError):
            dm.backward(y, [x])


def test_backward_requires_taped_loss():
    with pytest.raises(ContractError):
        dm.backward(Tensor(1.0), [])


def test_detached_subgraph_gets_zero_gradient():
    x = leaf([1.0, 2.0])
    w = leaf([3.0, 4.0])
    with Tape():
        loss = dm.sum(x.detach() * w) + dm.sum(dm.square(w.detach()))
        g = dm.backward(loss, [x, w])
    np.testing.assert_array_equal(g[x], [0.0, 0.0])
    np.testing.assert_array_equal(g[w], [1.0, 2.0])


def test_unrolled_linear_chain_matches_finite_differences(rng):
    W = leaf(rng.normal(size=(3, 3)) * 0.7)
    z0 = Tensor(rng.normal(size=(1, 3)))

    def loss():
        z, total = z0, Tensor(0.0)
        for _ in range(3):
            z = z @ W
            total = total + dm.sum(z)
        return total

    with Tape():
        g = dm.backward(loss(), [W])[W]
    num = numeric_grad(lambda: loss().item(), W.data)
    assert rel_err(g, num) <= 1e-4


def test_shared_input_accumulates():
    x = leaf(2.0)
    with Tape():
        g = dm.backward(x * x + x * 3.0 + dm.exp(x), [x])
    assert g[x] == pytest.approx(2 * 2.0 + 3.0 + math.exp(2.0))


# ------------------------------------------------- randomized gradient checks

def _pos(rng, shape):
    return rng.uniform(0.3, 2.0, size=shape)


UNARY = {
    "neg": (dm.neg, lambda r, s: r.normal(size=s)),
    "scale": (lambda a: dm.scale(a, -1.7), lambda r, s: r.normal(size=s)),
    "exp": (dm.exp, lambda r, s: r.normal(size=s)),
    "log": (dm.log, _pos),
    "tanh": (dm.tanh, lambda r, s: r.normal(size=s)),
    "elu": (dm.elu, lambda r, s: r.normal(size=s) + np.sign(r.normal(size=s)) * 1e-3),
    "softplus": (dm.softplus, lambda r, s: r.normal(size=s) * 3),
    "sigmoid": (dm.sigmoid, lambda r, s: r.normal(size=s) * 3),
    "square": (dm.square, lambda r, s: r.normal(size=s)),
    "clip": (lambda a: dm.clip(a, -0.5, 0.5), lambda r, s: r.uniform(-0.4, 0.4, size=s)),
    "reshape": (lambda a: dm.reshape(a, (-1,)), lambda r, s: r.normal(size=s)),
    "sum_axis": (lambda a: dm.sum(a, axis=1), lambda r, s: r.normal(size=s)),
    "mean_axis": (lambda a: dm.mean(a, axis=0), lambda r, s: r.normal(size=s)),
    "columns": (lambda a: dm.columns(a, 1, 3), lambda r, s: r.normal(size=s)),
}

BINARY = {
    "add": dm.add,
    "sub": dm.sub,
    "mul": dm.mul,
    "div": dm.div,
    "concat": lambda a, b: dm.concat([a, b], axis=-1),
}


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return dm.sum(out * weights)


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(20))
def test_unary_gradients(name, seed):
    fn, draw = UNARY[name]
    r = np.random.default_rng(seed)
    x = leaf(draw(r, (3, 4)))
    weights = r.normal(size=fn(Tensor(x.data)).shape)
    with Tape():
        g = dm.backward(_weighted(fn(x), weights), [x])[x]
    num = numeric_grad(lambda: float(np.sum(fn(Tensor(x.data)).data * weights)), x.data)
    assert rel_err(g, num) <= 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(20))
def test_binary_gradients(name, seed):
    fn = BINARY[name]
    r = np.random.default_rng(seed)
    a = leaf(r.normal(size=(3, 4)))
    b = leaf(_pos(r, (3, 4)) * np.sign(r.normal(size=(3, 4))))
    weights = r.normal(size=fn(Tensor(a.data), Tensor(b.data)).shape)

    def value():
        return float(np.sum(fn(Tensor(a.data), Tensor(b.data)).data * weights))

    with Tape():
        g = dm.backward(_weighted(fn(a, b), weights), [a, b])
    assert rel_err(g[a], numeric_grad(value, a.data)) <= 1e-4
    assert rel_err(g[b], numeric_grad(value, b.data)) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_scalar_broadcast_gradient(seed):
    r = np.random.default_rng(seed)
    a = leaf(r.normal(size=(2, 3)))
    s = leaf(r.normal())
    with Tape():
        g = dm.backward(dm.sum(dm.square(a * s + s)), [a, s])
    num = numeric_grad(lambda: float(np.sum((a.data * s.data + s.data) ** 2)), s.data)
    assert rel_err(g[s], num) <= 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_matmul_and_linear_gradients(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(4, 3)))
    w = leaf(r.normal(size=(3, 5)))
    b = leaf(r.normal(size=5))
    weights = r.normal(size=(4, 5))

    def value():
        return float(np.sum((x.data @ w.data + b.data) * weights))

    with Tape():
        g = dm.backward(_weighted(dm.linear(x, w, b), weights), [x, w, b])
    for p in (x, w, b):
        assert rel_err(g[p], numeric_grad(value, p.data)) <= 1e-4
    with Tape():
        g2 = dm.backward(_weighted(x @ w, weights), [x, w])
    assert rel_err(g2[w], x.data.T @ weights) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_gradient(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(3, 4)))
    gain = leaf(r.normal(size=4))
    bias = leaf(r.normal(size=4))
    weights = r.normal(size=(3, 4))

    def value():
        return float(np.sum(dm.layer_norm(Tensor(x.data), Tensor(gain.data), Tensor(bias.data)).data * weights))

    with Tape():
        g = dm.backward(_weighted(dm.layer_norm(x, gain, bias), weights), [x, gain, bias])
    for p in (x, gain, bias):
        assert rel_err(g[p], numeric_grad(value, p.data)) <= 1e-5


def test_clip_straight_through_passes_gradient_everywhere():
    x = leaf([-3.0, 0.0, 3.0])
    with Tape():
        y = dm.clip_straight_through(x, -1.0, 1.0)
        g = dm.backward(dm.sum(y * np.array([1.0, 2.0, 3.0])), [x])
    np.testing.assert_array_equal(y.data, [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(g[x], [1.0, 2.0, 3.0])


# ------------------------------------------------------------------ optimizer

def test_clip_global_norm_cases():
    g = [np.array([30.0, 40.0])]
    assert dm.clip_global_norm(g, 100.0)[0].tolist() == [30.0, 40.0]
    np.testing.assert_allclose(dm.clip_global_norm([np.array([300.0, 400.0])], 100.0)[0], [60.0, 80.0])
    with pytest.raises(ContractError):
        dm.clip_global_norm(g, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12), st.floats(1e-3, 1e3))
def test_clip_never_grows_components(values, max_norm):
    g = [np.array(values[: len(values) // 2 + 1]), np.array(values[len(values) // 2 + 1:] or [0.0])]
    out = dm.clip_global_norm(g, max_norm)
    for before, after in zip(g, out):
        assert np.all(np.abs(after) <= np.abs(before) + 1e-12)
    assert dm.global_norm(out) <= max_norm * (1 + 1e-12) or dm.global_norm(g) <= max_norm


def test_adam_zero_gradient_keeps_parameters():
    p = leaf([1.0, -2.0])
    st_ = AdamState.for_params([p], lr=0.1)
    dm.adam_step(st_, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    p = leaf([1.0, 1.0, 1.0])
    st_ = AdamState.for_params([p], lr=1e-4)
    dm.adam_step(st_, [p], [np.array([0.3, -5.0, 1e-3])])
    np.testing.assert_allclose(p.data - 1.0, [-1e-4, 1e-4, -1e-4], rtol=1e-4)
    assert st_.step == 1


def test_adam_is_deterministic():
    results = []
    for _ in range(2):
        r = np.random.default_rng(7)
        p = leaf(r.normal(size=4))
        st_ = AdamState.for_params([p], lr=1e-2)
        for _ in range(5):
            dm.adam_step(st_, [p], [r.normal(size=4)])
        results.append(p.data.copy())
    assert np.array_equal(results[0], results[1])


def test_adam_rejects_nan_and_names_parameter():
    p = Tensor(np.ones(2), requires_grad=True, name="policy.l0.w")
    st_ = AdamState.for_params([p])
    with pytest.raises(NumericError, match="policy.l0.w"):
        dm.adam_step(st_, [p], [np.array([1.0, np.nan])])


def test_polyak_cases():
    t, o = leaf([0.0]), leaf([1.0])
    dm.polyak_update([t], [o], 0.005)
    assert t.data[0] == pytest.approx(0.005)
    dm.polyak_update([t], [o], 1.0)
    assert t.data[0] == 1.0
    with pytest.raises(ContractError):
        dm.polyak_update([t], [o], 0.0)


def test_polyak_converges_geometrically():
    t, o = leaf([0.0]), leaf([1.0])
    for _ in range(100):
        dm.polyak_update([t], [o], 0.1)
    assert t.data[0] == pytest.approx(1.0 - 0.9 ** 100, abs=1e-12)
