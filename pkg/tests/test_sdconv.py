import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdconv import tensor as T
from sdconv.errors import ConfigError, ContractError, DimensionError
from sdconv.sdconv import (AttentionBranch, MaskMode, SDConv2d, aggregate, anneal_attention_temperature,
                           compute_mask)
from sdconv.tensor import Parameter, Tensor

from oracles import naive_conv2d, numeric_grad, rel_error, sigmoid


def make_layer(rng, cin=4, cout=3, k=3, mode=MaskMode.DIFFERENT, stride=1, padding=1, groups=1, r=2,
               dtype=np.float64):
    layer = SDConv2d(cin, cout, 3, stride, padding, groups, k=k, reduce_ratio=r, mode=mode, rng=rng)
    for p in layer.parameters():
        p.data = p.data.astype(dtype)
    if layer.expert_bias is not None:
        layer.expert_bias.data = rng.standard_normal(layer.expert_bias.shape).astype(dtype)
    return layer


def per_sample_oracle(layer, x):
    """Loop over samples: aggregate with the layer's own pi and masks, then plain convolution."""
    with T.no_grad():
        pi = layer.attention_weights(Tensor(x)).data
        state = layer.masks()
    masks = None if state is None else state.hard.data
    outs = []
    for n in range(x.shape[0]):
        agg = aggregate(pi[n], layer.experts, layer.expert_bias, masks)
        s = layer.spec
        outs.append(naive_conv2d(x[n:n + 1], agg.weight, agg.bias, s.stride, s.padding, s.groups))
    return np.concatenate(outs)


# -- masks --------------------------------------------------------------------------

def test_mask_worked_example():
    soft, hard = compute_mask(np.array([0.5, -0.1]), 0.3, 1 / 1024)
    psi = sigmoid(np.array([0.2, -0.2]))
    np.testing.assert_allclose(psi, [0.5498, 0.4502], atol=1e-4)
    np.testing.assert_allclose(soft.data.astype(np.float64), [1.0, 0.0], atol=1e-9)
    np.testing.assert_array_equal(hard.data, [1.0, 0.0])


def test_mask_threshold_far_below_keeps_everything(rng):
    _, hard = compute_mask(rng.standard_normal((4, 3, 3)), -10.0, 1 / 1024)
    assert hard.data.all()


def test_mask_tie_rounds_to_one():
    soft, hard = compute_mask(np.array([0.25, -0.25]), 0.25, 1 / 1024)
    np.testing.assert_array_equal(soft.data, [0.5, 0.5])
    np.testing.assert_array_equal(hard.data, [1.0, 1.0])


def test_fresh_threshold_starts_dense(rng):
    layer = make_layer(rng)
    assert layer.hard_masks().all()


def test_mask_rejects_non_positive_sharpness():
    with pytest.raises(ContractError):
        compute_mask(np.ones(3), 0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_mask_state_is_binary_away_from_the_gate_midpoint(w, tau):
    psi = sigmoid(abs(w) - tau)
    soft, hard = compute_mask(np.array([w]), tau, 1 / 1024)
    if abs(2 * psi - 1) > 0.01:
        assert abs(soft.data[0] - hard.data[0]) < 1e-3


def test_same_mask_is_shared_across_experts(rng):
    w = rng.standard_normal((4, 2, 3, 3))
    soft, hard = compute_mask(w, 0.6, 1 / 1024, same_mask=True)
    assert hard.shape == w.shape
    for i in range(1, 4):
        np.testing.assert_array_equal(hard.data[0], hard.data[i])
    expected = np.abs(w).mean(axis=0) >= 0.6
    np.testing.assert_array_equal(hard.data[0].astype(bool), expected)


def test_threshold_gradient_matches_analytic_chain(rng):
    """d loss / d tau through the straight-through estimator at a moderate sharpness."""
    sharp = 0.2
    for _ in range(20):
        w = rng.uniform(-1, 1, 6)
        tau = Parameter(np.array(rng.uniform(0, 0.5)))
        coef = rng.uniform(-1, 1, 6)
        soft, hard = compute_mask(Tensor(w), tau, sharp)
        (hard * Tensor(coef)).sum().backward()
        psi = sigmoid(np.abs(w) - tau.data)
        m = sigmoid((2 * psi - 1) / sharp)
        analytic = np.sum(coef * m * (1 - m) * (2 / sharp) * psi * (1 - psi) * -1.0)
        assert rel_error(tau.grad, analytic) < 1e-5


def test_soft_mask_gradient_finite_differences(rng):
    w = rng.uniform(-2, 2, (3, 4))
    tau = np.array(rng.uniform(-0.5, 0.5))
    coef = rng.uniform(-1, 1, (3, 4))
    wp, tp = Parameter(w), Parameter(tau)
    soft, _ = compute_mask(wp, tp, 0.2)
    (soft * Tensor(coef)).sum().backward()
    f = lambda: float((compute_mask(Tensor(w), Tensor(tau), 0.2)[0].data * coef).sum())  # noqa: E731
    assert rel_error(wp.grad, numeric_grad(f, w)) < 1e-4
    assert rel_error(tp.grad, numeric_grad(f, tau)) < 1e-4


# -- aggregation --------------------------------------------------------------------

def test_aggregate_hand_example():
    agg = aggregate(np.array([0.3, 0.7]), np.array([2.0, 4.0]), masks=np.array([1.0, 0.0]))
    assert agg.weight == pytest.approx(0.6)


def test_aggregate_one_hot_selects_masked_expert(rng):
    w = rng.standard_normal((3, 2, 2))
    b = rng.standard_normal((3, 2))
    m = (rng.random(w.shape) < 0.5).astype(np.float64)
    agg = aggregate(np.array([0.0, 1.0, 0.0]), w, b, m)
    np.testing.assert_array_equal(agg.weight, m[1] * w[1])
    np.testing.assert_array_equal(agg.bias, b[1])


def test_aggregate_nonzero_set_is_union_of_masks(rng):
    w = rng.standard_normal((4, 5, 5)) + 3.0
    m = (rng.random(w.shape) < 0.3).astype(np.float64)
    agg = aggregate(np.full(4, 0.25), w, masks=m)
    np.testing.assert_array_equal(np.flatnonzero(agg.weight), np.flatnonzero(m.any(axis=0)))


# -- attention ------------------------------------------------------------------------

def test_attention_zero_weights_is_uniform():
    branch = AttentionBranch(8, 4, 2)
    for p in branch.parameters():
        p.data[...] = 0
    pi = branch(Tensor(np.zeros((2, 8, 3, 3))), 1.0)
    np.testing.assert_allclose(pi.data, 0.25)


def test_attention_high_temperature_approaches_uniform(rng):
    branch = AttentionBranch(8, 4, 2, rng)
    pi = branch(Tensor(rng.standard_normal((3, 8, 4, 4))), 1e6)
    np.testing.assert_allclose(pi.data, 0.25, atol=1e-5)


def test_attention_matches_scalar_reevaluation(rng):
    branch = AttentionBranch(4, 3, 2, rng)
    x = rng.standard_normal((1, 4, 3, 3))
    pi = branch(Tensor(x), 1.0).data[0]
    pooled = [sum(x[0, c].ravel()) / 9 for c in range(4)]
    W1, b1 = branch.reduce.weight.data, branch.reduce.bias.data
    W2, b2 = branch.expand.weight.data, branch.expand.bias.data
    hidden = [max(0.0, sum(W1[j, c] * pooled[c] for c in range(4)) + b1[j]) for j in range(2)]
    logits = [sum(W2[i, j] * hidden[j] for j in range(2)) + b2[i] for i in range(3)]
    e = [np.exp(v - max(logits)) for v in logits]
    np.testing.assert_allclose(pi, [v / sum(e) for v in e], atol=1e-6)


def test_attention_gradient_finite_differences(rng):
    branch = AttentionBranch(4, 3, 2, rng)
    for p in branch.parameters():
        p.data = p.data.astype(np.float64)
    x = rng.uniform(-2, 2, (2, 4, 3, 3))
    coef = rng.uniform(-1, 1, (2, 3))
    xp = Parameter(x)
    (branch(xp, 0.7) * Tensor(coef)).sum().backward()
    f = lambda: float((branch(Tensor(x), 0.7).data * coef).sum())  # noqa: E731
    assert rel_error(xp.grad, numeric_grad(f, x)) < 1e-4
    w = branch.reduce.weight
    analytic = w.grad.copy()
    assert rel_error(analytic, numeric_grad(f, w.data)) < 1e-4


def test_attention_config_errors():
    with pytest.raises(ConfigError):
        AttentionBranch(6, 4, 4)
    branch = AttentionBranch(4, 2, 2)
    with pytest.raises(ContractError):
        branch(Tensor(np.zeros((1, 4, 2, 2))), 0.0)


def test_temperature_annealing():
    assert anneal_attention_temperature(0, 30, 1, 100) == 30
    assert anneal_attention_temperature(50, 30, 1, 100) == pytest.approx(15.5)
    assert anneal_attention_temperature(100, 30, 1, 100) == 1
    assert anneal_attention_temperature(10 ** 6, 30, 1, 100) == 1
    with pytest.raises(ConfigError):
        anneal_attention_temperature(0, 30, 1, 0)


# -- layer forward ----------------------------------------------------------------------

@pytest.mark.parametrize("mode", [MaskMode.DIFFERENT, MaskMode.SAME, MaskMode.DYNAMIC])
def test_batched_forward_matches_per_sample_loop(backend, mode, rng):
    layer = make_layer(rng, cin=4, cout=4, k=3, mode=mode, stride=2, groups=2)
    layer.threshold.data = np.array(0.4)
    x = rng.standard_normal((3, 4, 6, 6))
    out = layer(Tensor(x))
    assert np.abs(out.data - per_sample_oracle(layer, x)).max() <= 1e-6


def test_one_hot_attention_equals_plain_conv(rng):
    layer = make_layer(rng, k=3, mode=MaskMode.DYNAMIC)
    layer.attention_weights = lambda x: Tensor(np.array([[0.0, 0.0, 1.0]]))
    x = rng.standard_normal((1, 4, 5, 5))
    out = layer(Tensor(x))
    ref = T.conv2d(Tensor(x), layer.experts[2], layer.expert_bias[2], 1, 1)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)


def test_identical_samples_give_identical_rows(rng):
    layer = make_layer(rng)
    x = np.repeat(rng.standard_normal((1, 4, 5, 5)), 2, axis=0)
    out = layer(Tensor(x)).data
    np.testing.assert_array_equal(out[0], out[1])


def test_all_ones_masks_equal_dense_dynamic_bitwise(rng):
    layer = make_layer(rng, dtype=np.float32)
    x = Tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32))
    sparse = layer(x).data
    layer.mode = MaskMode.DYNAMIC
    dense = layer(x).data
    assert layer.hard_masks().all()
    np.testing.assert_array_equal(sparse, dense)


def test_static_mode_uses_first_expert(rng):
    layer = make_layer(rng, mode=MaskMode.STATIC)
    x = rng.standard_normal((2, 4, 5, 5))
    ref = naive_conv2d(x, layer.experts.data[0], layer.expert_bias.data[0], 1, 1)
    np.testing.assert_allclose(layer(Tensor(x)).data, ref, atol=1e-10)


def test_single_expert_layer_has_no_attention(rng):
    layer = SDConv2d(3, 2, 3, k=1, rng=rng)
    assert layer.attention is None
    assert layer(Tensor(rng.standard_normal((2, 3, 4, 4)))).shape == (2, 2, 2, 2)


def test_layer_input_errors(rng):
    layer = make_layer(rng)
    with pytest.raises(DimensionError, match="axis 1"):
        layer(Tensor(np.zeros((1, 5, 5, 5))))
    with pytest.raises(DimensionError):
        layer(Tensor(np.zeros((4, 5, 5))))
    with pytest.raises(ConfigError):
        SDConv2d(4, 4, 3, k=0)


def test_layer_gradients_reach_every_parameter(rng):
    layer = make_layer(rng)
    layer.threshold.data = np.array(0.3)
    layer.sharpness = 0.2
    x = rng.standard_normal((2, 4, 5, 5))
    out = layer(Tensor(x))
    loss = (out * out).sum() + layer.last_masks.soft.sum()
    loss.backward()
    for name, p in layer.named_parameters():
        assert p.grad is not None and np.isfinite(p.grad).all(), name
    assert layer.threshold.grad != 0


def test_layer_gradient_finite_differences_with_masks_fixed(rng):
    """Away from mask flips the layer is smooth in W, b and x."""
    layer = make_layer(rng)
    layer.threshold.data = np.array(0.2)
    x = rng.uniform(-2, 2, (2, 4, 4, 4))
    coef = rng.uniform(-1, 1, (2, 3, 4, 4))
    xp = Parameter(x)
    (layer(xp) * Tensor(coef)).sum().backward()
    f = lambda: float((layer(Tensor(x)).data * coef).sum())  # noqa: E731
    assert rel_error(xp.grad, numeric_grad(f, x)) < 1e-4
    b = layer.expert_bias
    assert rel_error(b.grad, numeric_grad(f, b.data)) < 1e-4
