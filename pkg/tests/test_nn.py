import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gtn.autodiff import backward, finite_difference_check
from gtn.nn import (ConfigError, LayerSpec, Network, activation, cross_entropy, kaiming_init,
                    kaiming_std, loss, mse, weight_normalize, weight_params)

D = torch.float64


def t(v):
    return torch.tensor(v, dtype=D)


# ---------------------------------------------------------------- weight normalization

def test_weight_norm_examples():
    assert torch.allclose(weight_normalize(t([[3.0, 4.0]]), t([10.0])), t([[6.0, 8.0]]))
    assert torch.allclose(weight_normalize(t([[6.0, 8.0]]), t([10.0])), t([[6.0, 8.0]]))
    assert torch.equal(weight_normalize(t([[1.0, -2.0], [5.0, 0.5]]), t([0.0, 0.0])), torch.zeros(2, 2, dtype=D))


def test_weight_norm_row_norms_equal_gains():
    v = torch.randn(5, 3, 3, 3, dtype=D)
    g = torch.randn(5, dtype=D)
    w = weight_normalize(v, g)
    assert torch.allclose(w.reshape(5, -1).norm(dim=1), g.abs(), atol=1e-10)


def test_weight_norm_zero_direction_is_finite():
    w = weight_normalize(torch.zeros(2, 3, dtype=D), t([1.0, 2.0]))
    assert torch.isfinite(w).all()


finite_rows = arrays(np.float64, (3, 4), elements=st.floats(-5, 5)).filter(
    lambda a: (np.linalg.norm(a, axis=1) > 0.1).all())


# the 1e-12 guard inside the norm perturbs invariance by about 1e-12 / |cV|^2 <= 1e-8 here
@settings(max_examples=40, deadline=None)
@given(finite_rows, st.floats(0.1, 100.0))
def test_weight_norm_direction_invariance(v, c):
    v = torch.as_tensor(v)
    g = t([1.5, -0.5, 2.0]).requires_grad_()
    w1 = weight_normalize(v, g)
    w2 = weight_normalize(c * v, g)
    assert torch.allclose(w1, w2, rtol=1e-7, atol=1e-12)
    x = t([1.0, 2.0, 3.0, 4.0])
    g1 = backward((w1 @ x).pow(2).sum(), {"g": g})["g"]
    g2 = backward((w2 @ x).pow(2).sum(), {"g": g})["g"]
    assert torch.allclose(g1, g2, rtol=1e-7, atol=1e-10)


def test_weight_norm_gradients_match_finite_differences():
    point = {"v": torch.randn(3, 4, dtype=D), "g": torch.randn(3, dtype=D)}
    x = torch.randn(4, dtype=D)
    assert finite_difference_check(lambda p: (weight_normalize(p["v"], p["g"]) @ x).tanh().sum(), point,
                                   h=1e-5) <= 1e-5


# ---------------------------------------------------------------- initialization

def test_kaiming_std_for_large_fc():
    w = kaiming_init((1000, 1000), torch.Generator().manual_seed(0), D)
    expected = math.sqrt(2 / (1000 * (1 + 0.1 ** 2)))
    assert abs(w.std().item() - expected) / expected < 0.05


def test_kaiming_is_deterministic():
    a = weight_params("l", (8, 4, 3, 3), torch.Generator().manual_seed(3), torch.float32)
    b = weight_params("l", (8, 4, 3, 3), torch.Generator().manual_seed(3), torch.float32)
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    assert torch.equal(a["l.b"], torch.zeros(8))


def test_kaiming_fan_in_one():
    assert math.isfinite(kaiming_std(1))


def test_weight_norm_init_preserves_kaiming_weights():
    p = weight_params("l", (6, 5), torch.Generator().manual_seed(1), D, weight_norm=True)
    raw = weight_params("l", (6, 5), torch.Generator().manual_seed(1), D, weight_norm=False)
    assert torch.allclose(weight_normalize(p["l.v"], p["l.g"]), raw["l.w"], atol=1e-12)


# ---------------------------------------------------------------- forward

def test_batchnorm_train_statistics():
    net = Network([LayerSpec("conv", 6), LayerSpec("batchnorm")], (3, 8, 8))
    params = net.init(torch.Generator().manual_seed(0), D)
    out, stats = net.forward(params, torch.randn(16, 3, 8, 8, dtype=D) * 3 + 2)
    assert out.mean((0, 2, 3)).abs().max() < 1e-5
    assert (out.var((0, 2, 3), unbiased=False) - 1).abs().max() < 1e-3
    assert "1.batchnorm" in stats


def test_eval_mode_uses_stored_statistics_and_is_deterministic():
    net = Network([LayerSpec("fc", 4), LayerSpec("batchnorm")], (3,))
    params = net.init(torch.Generator().manual_seed(0), D)
    _, stats = net.forward(params, torch.randn(32, 3, dtype=D))
    x = torch.randn(5, 3, dtype=D) + 10
    a, _ = net.forward(params, x, train=False, stats=stats)
    b, _ = net.forward(params, x, train=False, stats=stats)
    assert torch.equal(a, b)
    # stored statistics, not the shifted batch's own, so the output is not re-centred
    assert a.mean(0).abs().max() > 1


def test_identity_network():
    net = Network([LayerSpec("activation", fn="identity")], (4,))
    x = torch.randn(3, 4)
    assert torch.equal(net.forward({}, x)[0], x)


def test_fc_with_identity_weights():
    net = Network([LayerSpec("fc", 4)], (4,), weight_norm=False)
    params = {"0.fc.w": torch.eye(4), "0.fc.b": torch.zeros(4)}
    x = torch.randn(3, 4)
    assert torch.equal(net.forward(params, x)[0], x)


def test_leaky_relu_slope():
    assert torch.allclose(activation(t([-2.0, 3.0])), t([-0.2, 3.0]))


def test_shape_mismatch_names_the_layer():
    with pytest.raises(ConfigError, match="1.fc"):
        Network([LayerSpec("conv", 4), LayerSpec("fc", 3)], (1, 4, 4))
    net = Network([LayerSpec("conv", 4)], (1, 4, 4))
    with pytest.raises(ConfigError, match="0.conv"):
        net.forward(net.init(torch.Generator()), torch.zeros(2, 3, 4, 4))


def test_layer_spec_validation_and_text_round_trip():
    with pytest.raises(ConfigError):
        LayerSpec("conv", 0)
    with pytest.raises(ConfigError):
        LayerSpec("maxpool", kernel=2, stride=0)
    for spec in [LayerSpec("conv", 12, 3, 2), LayerSpec("activation", fn="tanh"),
                 LayerSpec("reshape", shape=(4, 7, 7)), LayerSpec("maxpool", kernel=2, stride=2)]:
        assert LayerSpec.from_text(spec.to_text()) == spec


# ---------------------------------------------------------------- losses

def test_uniform_logits_cross_entropy_is_ln10():
    assert cross_entropy(torch.zeros(4, 10, dtype=D), torch.eye(10, dtype=D)[:4]).item() == pytest.approx(math.log(10))


def test_mse_of_identical_is_zero():
    x = torch.randn(5, 3)
    assert mse(x, x).item() == 0.0
    assert loss("mse", x, x).item() == 0.0


def test_cross_entropy_gradient_is_softmax_minus_target():
    logits = torch.randn(1, 10, dtype=D, requires_grad=True)
    target = torch.softmax(torch.randn(1, 10, dtype=D), 1)
    grad = backward(cross_entropy(logits, target), {"l": logits})["l"]
    assert torch.allclose(grad, torch.softmax(logits, 1) - target, atol=1e-12)
    assert finite_difference_check(lambda z: cross_entropy(z, target), logits.detach(), h=1e-5) <= 1e-6


def test_cross_entropy_is_stable_for_large_logits():
    logits = t([[1000.0, 0.0, -1000.0]])
    assert torch.isfinite(cross_entropy(logits, t([[0.0, 0.0, 1.0]])))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 10), elements=st.floats(-30, 30)), st.lists(st.integers(0, 9), min_size=4, max_size=4))
def test_losses_are_non_negative(logits, labels):
    logits = torch.as_tensor(logits)
    assert cross_entropy(logits, torch.tensor(labels)).item() >= 0
    assert mse(logits, torch.zeros_like(logits)).item() >= 0


def test_cross_entropy_zero_iff_certain():
    assert cross_entropy(t([[200.0, 0.0]]), t([[1.0, 0.0]])).item() == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(t([[2.0, 0.0]]), t([[1.0, 0.0]])).item() > 0
