import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qecnn.nn import (
    ConvLayer,
    ShapeError,
    TrainConfig,
    backward_layers,
    conv2d_forward,
    forward_layers,
    prelu,
    sgd_step,
)

from oracles import conv_nested_loop, finite_difference, max_relative_error


def layer(out_ch, in_ch, k, rng=None, activation=False, dtype=np.float64, **kw):
    rng = rng or np.random.default_rng(0)
    return ConvLayer(
        weight=rng.normal(size=(out_ch, in_ch, k, k)).astype(dtype),
        bias=rng.normal(size=out_ch).astype(dtype),
        activation=activation,
        **kw,
    )


class TestConv:
    def test_identity_kernel(self):
        l = ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1), activation=False)
        assert conv2d_forward(np.full((1, 1, 1), 7.0), l)[0, 0, 0] == 7.0

    def test_zero_padding_arithmetic(self):
        l = ConvLayer(np.ones((1, 1, 3, 3)), np.zeros(1), activation=False)
        out = conv2d_forward(np.ones((1, 3, 3)), l)[0]
        assert out[1, 1] == 9
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
        assert out[0, 1] == 6

    def test_matches_nested_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 5))
        l = layer(4, 2, 3, rng)
        np.testing.assert_allclose(conv2d_forward(x, l), conv_nested_loop(x, l.weight, l.bias), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 5, 7, 9])
    def test_matches_nested_loop_with_prelu(self, k):
        rng = np.random.default_rng(k)
        x = rng.normal(size=(3, 6, 7))
        l = layer(2, 3, k, rng, activation=True, slope=0.1)
        np.testing.assert_allclose(conv2d_forward(x, l), conv_nested_loop(x, l.weight, l.bias, slope=0.1),
                                   rtol=1e-12, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((3, 4, 4)), layer(1, 2, 3))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ConvLayer(np.zeros((1, 1, 2, 2)), np.zeros(1))

    def test_batch_equals_individual(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 2, 8, 8))
        l = layer(3, 2, 5, rng, activation=True)
        batch = conv2d_forward(x, l)
        for i in range(3):
            np.testing.assert_allclose(batch[i], conv2d_forward(x[i], l), rtol=1e-13)

    def test_chunked_im2col_matches(self, monkeypatch):
        import qecnn.nn as nn

        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 11, 9))
        l = layer(2, 3, 3, rng)
        full = conv2d_forward(x, l)
        monkeypatch.setattr(nn, "_CHUNK_BYTES", 1)
        np.testing.assert_allclose(conv2d_forward(x, l), full, rtol=1e-13)

    @settings(max_examples=25, deadline=None)
    @given(k=st.sampled_from([1, 3, 5, 7, 9]), h=st.integers(1, 12), w=st.integers(1, 12),
           alpha=st.floats(-10, 10, allow_nan=False))
    def test_spatial_size_and_linearity(self, k, h, w, alpha):
        rng = np.random.default_rng(h * 13 + w)
        x = rng.normal(size=(2, h, w))
        l = ConvLayer(rng.normal(size=(3, 2, k, k)), np.zeros(3), activation=False)
        out = conv2d_forward(x, l)
        assert out.shape == (3, h, w)
        np.testing.assert_allclose(conv2d_forward(alpha * x, l), alpha * out, rtol=1e-6, atol=1e-9)


class TestPrelu:
    def test_positive_branch(self):
        assert prelu(2.0, 0.1) == 2.0

    def test_negative_branch(self):
        assert prelu(-4.0, 0.25) == -1.0

    def test_zero_slope_is_relu(self):
        x = np.linspace(-3, 3, 13)
        np.testing.assert_array_equal(prelu(x, 0.0), np.maximum(0, x))

    @given(a=st.floats(-5, 5, allow_nan=False))
    def test_continuity_at_zero(self, a):
        assert prelu(0.0, a) == 0.0
        for eps in (1e-3, 1e-6, 1e-9):
            assert abs(prelu(-eps, a) - prelu(eps, a)) <= eps * (1 + abs(a)) * (1 + 1e-9)


class TestBackward:
    def test_bias_gradient_of_sum(self):
        l = layer(2, 1, 3, activation=False)
        x = np.random.default_rng(0).normal(size=(1, 1, 5, 6))
        _, tape = forward_layers([l], x, record=True)
        g = backward_layers([l], tape, np.ones((1, 2, 5, 6)))
        np.testing.assert_allclose(g[0]["bias"], [30.0, 30.0])

    def test_slope_gradient_negative_constant(self):
        # identity 1x1 conv so the pre-activation equals the input
        l = ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1), slope=0.25, activation=True)
        x = -np.ones((1, 1, 4, 5))
        _, tape = forward_layers([l], x, record=True)
        g = backward_layers([l], tape, np.ones((1, 1, 4, 5)))
        assert g[0]["slope"] == -20.0

    def test_tape_mismatch(self):
        l = layer(1, 1, 3)
        _, tape = forward_layers([l], np.zeros((1, 1, 4, 4)), record=True)
        with pytest.raises(RuntimeError):
            backward_layers([l, l], tape, np.zeros((1, 1, 4, 4)))


def _check_gradients(layers, x, seed=0):
    """Max relative error between analytic and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    out = forward_layers(layers, x)
    proj = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(forward_layers(layers, x) * proj))

    _, tape = forward_layers(layers, x, record=True)
    grads = backward_layers(layers, tape, proj)
    worst = 0.0
    for lyr, g in zip(layers, grads):
        for key in ("weight", "bias", "skip_weight"):
            value = getattr(lyr, key)
            if value is None:
                continue
            worst = max(worst, max_relative_error(g[key], finite_difference(loss, value)))
        box = np.array([lyr.slope])

        def slope_loss(lyr=lyr, box=box):
            lyr.slope = float(box[0])
            return loss()

        num = finite_difference(slope_loss, box)
        lyr.slope = float(box[0])
        worst = max(worst, max_relative_error([g["slope"]], num))
    return worst


def test_two_layer_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    layers = [layer(3, 1, 3, rng, activation=True, slope=0.2), layer(1, 3, 3, rng)]
    x = rng.normal(size=(1, 1, 6, 6))
    assert _check_gradients(layers, x) < 1e-5


@settings(max_examples=6, deadline=None)
@given(depth=st.integers(1, 4), size=st.integers(3, 8), seed=st.integers(0, 1000))
def test_random_stacks_gradients(depth, size, seed):
    rng = np.random.default_rng(seed)
    chans = [1] + list(rng.integers(1, 3, size=depth - 1)) + [1]
    layers = [layer(int(chans[i + 1]), int(chans[i]), int(rng.choice([1, 3, 5])), rng,
                    activation=i < depth - 1, slope=float(rng.uniform(0.05, 0.5)))
              for i in range(depth)]
    x = rng.normal(size=(1, 1, size, size))
    assert _check_gradients(layers, x, seed) < 1e-5


class TestSgd:
    def test_default_hyperparameters_clip(self):
        l = ConvLayer(np.zeros((1, 1, 1, 1)), np.zeros(1), activation=False)
        cfg = TrainConfig(learning_rate=0.1, clip_beta=0.01)
        new = sgd_step([l], [{"weight": np.full((1, 1, 1, 1), 5.0), "bias": np.zeros(1), "slope": 0.0}], cfg, 0)
        # raw 5 is clipped to beta / lr = 0.1, times lr 0.1
        assert new[0].weight[0, 0, 0, 0] == pytest.approx(-0.01)

    def test_zero_gradient_no_change(self):
        l = layer(2, 2, 3)
        g = {"weight": np.zeros_like(l.weight), "bias": np.zeros(2), "slope": 0.0}
        new = sgd_step([l], [g], TrainConfig(), 3)
        np.testing.assert_array_equal(new[0].weight, l.weight)
        np.testing.assert_array_equal(new[0].bias, l.bias)
        assert new[0].slope == l.slope

    def test_decay(self):
        cfg = TrainConfig(learning_rate=0.1, decay_factor=10, decay_epochs=40)
        assert cfg.effective_rate(39) == pytest.approx(0.1)
        assert cfg.effective_rate(40) == pytest.approx(0.01)
        assert cfg.effective_rate(80) == pytest.approx(0.001)

    def test_inputs_untouched(self):
        l = layer(1, 1, 3)
        before = l.weight.copy()
        sgd_step([l], [{"weight": np.ones_like(l.weight), "bias": np.ones(1), "slope": 1.0}], TrainConfig(), 0)
        np.testing.assert_array_equal(l.weight, before)

    @given(epoch=st.integers(0, 200), scale=st.floats(1e-3, 1e3))
    def test_applied_step_bounded(self, epoch, scale):
        cfg = TrainConfig()
        rate = cfg.effective_rate(epoch)
        rng = np.random.default_rng(epoch)
        l = ConvLayer(np.zeros((2, 1, 3, 3)), np.zeros(2), activation=False)
        g = {"weight": rng.normal(size=(2, 1, 3, 3)) * scale, "bias": rng.normal(size=2) * scale, "slope": 0.0}
        new = sgd_step([l], [g], cfg, epoch)
        applied = -new[0].weight / rate
        assert np.all(np.abs(applied) <= abs(cfg.clip_beta / rate) * (1 + 1e-9))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(decay_factor=1.0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
