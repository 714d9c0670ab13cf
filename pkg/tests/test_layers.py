import numpy as np
import pytest

from cfcm.layers import EVAL, TRAIN, ConvBNReLU, ConvLayer, NormLayer, batchnorm_forward, conv_bn_relu, he_init
from cfcm.tensor import ShapeError, Tensor, finite_diff_check, mul, reduce


def test_he_init_is_deterministic_and_scaled():
    a = he_init((64, 32, 3, 3), seed=5)
    assert a.tobytes() == he_init((64, 32, 3, 3), seed=5).tobytes()
    assert a.tobytes() != he_init((64, 32, 3, 3), seed=6).tobytes()
    target = 2.0 / (32 * 9)
    assert abs(a.var() / target - 1.0) < 0.1
    assert abs(a.mean()) < 0.01


def test_conv_layer_kernel_sizes():
    for k in (1, 3, 7):
        layer = ConvLayer(2, 3, k)
        assert layer(Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32))).shape == (1, 3, 8, 8)
    with pytest.raises(ValueError):
        ConvLayer(2, 3, 5)


def test_batchnorm_train_normalises_each_channel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2, dtype=np.float64)
    layer = NormLayer(3, dtype=np.float64)
    out = batchnorm_forward(x, layer, TRAIN).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3)) / (x.data.var(axis=(0, 2, 3)) + 1e-5))


def test_batchnorm_running_statistics_update():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 2, 3, 3)) + 5.0, dtype=np.float64)
    layer = NormLayer(2, momentum=0.1, dtype=np.float64)
    batchnorm_forward(x, layer, TRAIN)
    np.testing.assert_allclose(layer.running_mean.data, 0.1 * x.data.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(layer.running_var.data, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)))


def test_batchnorm_eval_uses_running_statistics():
    layer = NormLayer(1, dtype=np.float64)
    layer.running_mean.data[:] = 2.0
    layer.running_var.data[:] = 4.0 - 1e-5
    layer.gamma.data[:] = 3.0
    layer.beta.data[:] = 1.0
    out = batchnorm_forward(Tensor(np.full((1, 1, 2, 2), 6.0)), layer, EVAL).data
    np.testing.assert_allclose(out, 3.0 * (6.0 - 2.0) / 2.0 + 1.0)
    np.testing.assert_array_equal(layer.running_mean.data, 2.0)


@pytest.mark.parametrize("mode", [TRAIN, EVAL])
def test_batchnorm_gradient(mode):
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)), requires_grad=True, dtype=np.float64)
    layer = NormLayer(3, dtype=np.float64)
    layer.gamma.data = rng.standard_normal(3) + 1
    probe = Tensor(rng.standard_normal((4, 3, 5, 5)))
    saved = (layer.running_mean.data.copy(), layer.running_var.data.copy())

    def f():
        layer.running_mean.data, layer.running_var.data = saved[0].copy(), saved[1].copy()
        return reduce("sum", mul(batchnorm_forward(x, layer, mode), probe))

    assert finite_diff_check(f, [x, layer.gamma, layer.beta], 1e-6, None) < 1e-5


def test_batchnorm_channel_mismatch():
    with pytest.raises(ShapeError):
        batchnorm_forward(Tensor(np.zeros((1, 2, 2, 2))), NormLayer(3))


def test_conv_bn_relu_output_is_non_negative_and_deterministic():
    x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 8, 8)).astype(np.float32))
    block = ConvBNReLU(3, 4, 3, stride=2, seed=9)
    out = block(x, TRAIN).data
    assert out.shape == (2, 4, 4, 4) and out.min() >= 0
    again = conv_bn_relu(x, ConvBNReLU(3, 4, 3, stride=2, seed=9).conv, ConvBNReLU(3, 4, 3, 2, seed=9).norm, TRAIN)
    assert again.data.tobytes() == out.tobytes()


def test_train_and_eval_agree_once_running_stats_converge():
    x = Tensor(np.random.default_rng(4).standard_normal((4, 2, 6, 6)), dtype=np.float64)
    layer = NormLayer(2, momentum=0.5, eps=0.0, dtype=np.float64)
    for _ in range(60):
        train_out = batchnorm_forward(x, layer, TRAIN).data
    # running var is biased, matching the train-mode statistic
    np.testing.assert_allclose(batchnorm_forward(x, layer, EVAL).data, train_out, atol=1e-9)


def test_state_dict_round_trip_and_errors():
    a, b = ConvBNReLU(2, 3, seed=1), ConvBNReLU(2, 3, seed=2)
    b.load_state_dict(a.state_dict())
    assert a.conv.weight.data.tobytes() == b.conv.weight.data.tobytes()
    state = a.state_dict()
    state["conv.weight"] = np.zeros((3, 2, 1, 1))
    with pytest.raises(ShapeError, match="conv.weight"):
        b.load_state_dict(state)
    del state["conv.weight"]
    with pytest.raises(KeyError):
        b.load_state_dict(state)
